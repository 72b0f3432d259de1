#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csen/config.hpp"
#include "csen/eval.hpp"
#include "csen/grad_check.hpp"
#include "csen/model.hpp"
#include "csen/train.hpp"

namespace csen {

namespace cli_detail {

// ---------------------------------------------------------------------------
// argument parsing
// ---------------------------------------------------------------------------

struct ParsedArgs {
    std::string command;
    std::map<std::string, std::string> flags;
    std::vector<std::string> sets;
};

inline const std::set<std::string> kBoolFlags = {"perturb-gradient"};

inline ParsedArgs parse_args(const std::vector<std::string>& argv) {
    if (argv.empty())
        throw config_error(
            "missing command; expected synth, train, eval, rerank, ablate-groups, ablate-loss, "
            "export-embeddings or verify");
    ParsedArgs out;
    out.command = argv[0];
    for (std::size_t i = 1; i < argv.size(); ++i) {
        const std::string& tok = argv[i];
        if (tok.rfind("--", 0) != 0)
            throw config_error(cat("unexpected argument \"", tok, "\"; flags look like --name value"));
        const std::string name = tok.substr(2);
        if (kBoolFlags.count(name)) {
            out.flags[name] = "true";
            continue;
        }
        if (i + 1 >= argv.size()) throw config_error(cat("flag --", name, " needs a value"));
        if (name == "set")
            out.sets.push_back(argv[++i]);
        else
            out.flags[name] = argv[++i];
    }
    return out;
}

inline void check_flags(const ParsedArgs& args, const std::set<std::string>& allowed,
                        const std::vector<std::string>& required) {
    for (const auto& [name, value] : args.flags)
        if (!allowed.count(name))
            throw config_error(cat("command ", args.command, " does not take --", name));
    for (const auto& name : required)
        if (!args.flags.count(name))
            throw config_error(cat("command ", args.command, " requires --", name));
}

inline std::string flag_or(const ParsedArgs& args, const std::string& name, std::string dflt = "") {
    auto it = args.flags.find(name);
    return it == args.flags.end() ? std::move(dflt) : it->second;
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

inline void write_stamp(const RunConfig& rc, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json j{{"tool_version", kVersion},
                     {"config_hash", config_hash(rc)},
                     {"config", rc.to_json()}};
    const auto path = (std::filesystem::path(out_dir) / "config.json").string();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error(cat("cannot open ", path, " for writing"));
    f << j.dump(2) << "\n";
    if (!f) throw io_error(cat("failed writing ", path));
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error(cat("cannot open ", path, " for writing"));
    f << j.dump(2) << "\n";
    if (!f) throw io_error(cat("failed writing ", path));
}

struct LoadedData {
    std::string root;
    Dataset all;
    Dataset train;
};

inline LoadedData load_data(const std::string& data_dir) {
    LoadedData ld;
    ld.root = data_dir;
    ld.all = load_manifest((std::filesystem::path(data_dir) / "manifest.jsonl").string());
    ld.train = filter_split(ld.all, Split::train);
    return ld;
}

// Data-derived fields: class count from the train split, side-info table
// sized to cover every camera/viewpoint id in the manifest.
inline void fit_to_data(RunConfig& rc, const LoadedData& ld) {
    rc.model.num_ids = static_cast<std::int64_t>(label_map(ld.train).size());
    std::int64_t max_cam = 0, max_vp = 0;
    for (const auto& s : ld.all) {
        max_cam = std::max(max_cam, s.camera);
        max_vp = std::max(max_vp, s.viewpoint);
    }
    rc.model.side.num_cameras = std::max(rc.model.side.num_cameras, max_cam + 1);
    rc.model.side.num_viewpoints = std::max(rc.model.side.num_viewpoints, max_vp + 1);
}

inline void apply_ablation(RunConfig& rc, const std::string& ablate) {
    if (ablate.empty()) return;
    if (ablate == "no-sem") {
        rc.model.use_sem = false;
        rc.model.use_afem = false;
    } else if (ablate == "no-afem") {
        rc.model.use_afem = false;
    } else if (ablate == "no-cv") {
        rc.model.side.enabled = false;
    } else {
        throw config_error(cat("unknown ablation \"", ablate, "\"; expected no-sem, no-afem or no-cv"));
    }
}

inline nlohmann::json parse_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw io_error(cat("cannot open ", what, " file ", path));
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw config_error(cat(what, " file ", path, " is not valid JSON"));
    return j;
}

// Builds the resolved config for commands anchored on a checkpoint: defaults,
// then the config stored in the checkpoint, then --config, --protocol and
// --set overrides.
inline RunConfig resolve_from_checkpoint(const std::string& ck_path, const ParsedArgs& args) {
    nlohmann::json doc = RunConfig{}.to_json();
    const auto meta = checkpoint_read_meta(ck_path);
    if (!meta.config.empty()) {
        nlohmann::json stored = nlohmann::json::parse(meta.config, nullptr, false);
        if (stored.is_discarded())
            throw data_error(cat(ck_path, ": stored config is not valid JSON"));
        doc.merge_patch(stored);
    }
    if (args.flags.count("config")) doc.merge_patch(parse_json_file(args.flags.at("config"), "config"));
    if (args.flags.count("protocol")) {
        const std::string& p = args.flags.at("protocol");
        nlohmann::json proto;
        if (!p.empty() && p.front() == '{') {
            proto = nlohmann::json::parse(p, nullptr, false);
            if (proto.is_discarded()) throw config_error("--protocol inline JSON is malformed");
        } else {
            proto = parse_json_file(p, "protocol");
        }
        doc["eval"].merge_patch(proto);
    }
    for (const auto& o : args.sets) apply_override(doc, o);
    auto rc = RunConfig::from_json(doc);
    rc.validate();
    return rc;
}

// ---------------------------------------------------------------------------
// templated run bodies
// ---------------------------------------------------------------------------

template <typename S>
struct TrainOutcome {
    FitResult<S> res;
    EvalReport report;
    bool evaluated = false;
};

template <typename S>
TrainOutcome<S> run_train(const RunConfig& rc, const LoadedData& ld, const std::string& out_dir,
                          const std::string& resume_path, bool eval_after) {
    Model<S> model(rc.model);
    ParamSet<S> ps;
    Rng init_rng(mix_seed(rc.train.seed, 11));
    model.init_params(ps, init_rng);

    AdamState<S> opt;
    std::int64_t start_epoch = 0;
    if (!resume_path.empty()) {
        auto ck = checkpoint_load<S>(resume_path);
        auto stats = model.stats();
        restore_checkpoint(ps, stats, &opt, ck);
        start_epoch = ck.meta.epoch;
    }

    TrainOutcome<S> out;
    out.res = fit(model, ps, ld.train, ld.root, rc.train, rc.loss, out_dir,
                  config_identity(rc).dump(), start_epoch, &opt);
    if (eval_after) {
        out.report = evaluate(model, ps, ld.all, ld.root, rc.eval);
        out.evaluated = true;
    }
    return out;
}

template <typename S>
EvalReport run_eval(const RunConfig& rc, const LoadedData& ld, const std::string& ck_path,
                    const EvalProtocol& proto) {
    Model<S> model(rc.model);
    ParamSet<S> ps;
    Rng init_rng(1);
    model.init_params(ps, init_rng);
    auto ck = checkpoint_load<S>(ck_path);
    auto stats = model.stats();
    restore_checkpoint<S>(ps, stats, nullptr, ck);
    return evaluate(model, ps, ld.all, ld.root, proto);
}

template <typename S>
TensorPtr<S> run_extract(const RunConfig& rc, const Dataset& samples, const std::string& root,
                         const std::string& ck_path) {
    Model<S> model(rc.model);
    ParamSet<S> ps;
    Rng init_rng(1);
    model.init_params(ps, init_rng);
    auto ck = checkpoint_load<S>(ck_path);
    auto stats = model.stats();
    restore_checkpoint<S>(ps, stats, nullptr, ck);
    return extract_features(model, ps, samples, root);
}

// decltype-friendly precision dispatch
template <typename F>
auto with_precision(const std::string& precision, F&& f) {
    if (precision == "f64") return f(double{});
    return f(float{});
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

inline int cmd_synth(const ParsedArgs& args) {
    check_flags(args, {"config", "out"}, {"out"});
    auto rc = resolve_config(flag_or(args, "config"), args.sets);
    rc.paths.out = args.flags.at("out");
    write_stamp(rc, rc.paths.out);
    auto ds = synth_generate(rc.synth, rc.paths.out);
    nlohmann::json summary{{"command", "synth"},
                           {"images", ds.size()},
                           {"manifest", (std::filesystem::path(rc.paths.out) / "manifest.jsonl").string()},
                           {"config_hash", config_hash(rc)}};
    std::cout << summary.dump() << "\n";
    return 0;
}

inline int cmd_train(const ParsedArgs& args) {
    check_flags(args, {"config", "data", "out", "ablate", "resume"}, {"data", "out"});
    auto rc = resolve_config(flag_or(args, "config"), args.sets);
    rc.paths.data = args.flags.at("data");
    rc.paths.out = args.flags.at("out");

    auto ld = load_data(rc.paths.data);
    if (ld.train.empty()) throw data_error("training split is empty");
    fit_to_data(rc, ld);
    apply_ablation(rc, flag_or(args, "ablate"));
    rc.validate();
    write_stamp(rc, rc.paths.out);

    const std::string resume = flag_or(args, "resume");
    nlohmann::json summary{{"command", "train"}, {"config_hash", config_hash(rc)}};
    with_precision(rc.train.precision, [&](auto tag) {
        using S = decltype(tag);
        auto out = run_train<S>(rc, ld, rc.paths.out, resume, false);
        nlohmann::json hist{{"loss", nlohmann::json::array()}, {"lr", out.res.lr_history}};
        for (S v : out.res.loss_history) hist["loss"].push_back(static_cast<double>(v));
        write_json(hist, (std::filesystem::path(rc.paths.out) / "history.json").string());
        summary["steps"] = out.res.loss_history.size();
        summary["epochs"] = rc.train.epochs;
        if (!out.res.loss_history.empty())
            summary["final_loss"] = static_cast<double>(out.res.loss_history.back());
        summary["checkpoint"] =
            (std::filesystem::path(rc.paths.out) / "checkpoint_final.bin").string();
        return 0;
    });
    std::cout << summary.dump() << "\n";
    return 0;
}

inline int cmd_eval(const ParsedArgs& args) {
    check_flags(args, {"checkpoint", "config", "data", "out", "protocol"},
                {"checkpoint", "data", "out"});
    const std::string ck_path = args.flags.at("checkpoint");
    auto rc = resolve_from_checkpoint(ck_path, args);
    rc.paths.data = args.flags.at("data");
    rc.paths.out = args.flags.at("out");
    auto ld = load_data(rc.paths.data);
    write_stamp(rc, rc.paths.out);

    auto report = with_precision(rc.train.precision, [&](auto tag) {
        using S = decltype(tag);
        return run_eval<S>(rc, ld, ck_path, rc.eval);
    });
    auto j = report_to_json(report, rc.eval);
    write_json(j, (std::filesystem::path(rc.paths.out) / "report.json").string());
    std::cout << j.dump() << "\n";
    return 0;
}

inline int cmd_rerank(const ParsedArgs& args) {
    check_flags(args, {"checkpoint", "config", "data", "out", "protocol"},
                {"checkpoint", "data", "out"});
    const std::string ck_path = args.flags.at("checkpoint");
    auto rc = resolve_from_checkpoint(ck_path, args);
    rc.paths.data = args.flags.at("data");
    rc.paths.out = args.flags.at("out");
    auto ld = load_data(rc.paths.data);

    EvalProtocol plain = rc.eval;
    plain.rerank = false;
    EvalProtocol reranked = rc.eval;
    reranked.rerank = true;
    reranked.validate();
    rc.eval = reranked;  // the stamp records the protocol that names the command
    write_stamp(rc, rc.paths.out);

    nlohmann::json jp, jr;
    with_precision(rc.train.precision, [&](auto tag) {
        using S = decltype(tag);
        Model<S> model(rc.model);
        ParamSet<S> ps;
        Rng init_rng(1);
        model.init_params(ps, init_rng);
        auto ck = checkpoint_load<S>(ck_path);
        auto stats = model.stats();
        restore_checkpoint<S>(ps, stats, nullptr, ck);
        jp = report_to_json(evaluate(model, ps, ld.all, ld.root, plain), plain);
        jr = report_to_json(evaluate(model, ps, ld.all, ld.root, reranked), reranked);
        return 0;
    });
    write_json(jp, (std::filesystem::path(rc.paths.out) / "report_baseline.json").string());
    write_json(jr, (std::filesystem::path(rc.paths.out) / "report.json").string());
    nlohmann::json summary{{"command", "rerank"},
                           {"mAP_baseline", jp.at("mAP")},
                           {"mAP_reranked", jr.at("mAP")},
                           {"config_hash", config_hash(rc)}};
    std::cout << summary.dump() << "\n";
    return 0;
}

inline int cmd_export_embeddings(const ParsedArgs& args) {
    check_flags(args, {"checkpoint", "config", "data", "out", "split"}, {"checkpoint", "data", "out"});
    const std::string ck_path = args.flags.at("checkpoint");
    auto rc = resolve_from_checkpoint(ck_path, args);
    rc.paths.data = args.flags.at("data");
    rc.paths.out = args.flags.at("out");
    auto ld = load_data(rc.paths.data);
    write_stamp(rc, rc.paths.out);

    const std::string which = flag_or(args, "split", "all");
    if (which != "all" && which != "train" && which != "query" && which != "gallery")
        throw config_error(cat("--split must be train, query, gallery or all, got \"", which, "\""));
    Dataset samples = which == "all" ? ld.all : filter_split(ld.all, split_from_string(which));
    if (samples.empty()) throw data_error(cat("no samples in split \"", which, "\""));

    const auto path = (std::filesystem::path(rc.paths.out) / "embeddings.jsonl").string();
    with_precision(rc.train.precision, [&](auto tag) {
        using S = decltype(tag);
        auto feats = run_extract<S>(rc, samples, ld.root, ck_path);
        export_embeddings(path, samples, feats);
        return 0;
    });
    nlohmann::json summary{
        {"command", "export-embeddings"}, {"lines", samples.size()}, {"path", path}};
    std::cout << summary.dump() << "\n";
    return 0;
}

// One table row per requested group count; G values that do not divide d_f
// are reported as invalid rows and the sweep keeps going.
inline int cmd_ablate_groups(const ParsedArgs& args) {
    check_flags(args, {"config", "data", "out", "groups"}, {"data", "out"});
    auto rc = resolve_config(flag_or(args, "config"), args.sets);
    rc.paths.data = args.flags.at("data");
    rc.paths.out = args.flags.at("out");
    auto ld = load_data(rc.paths.data);
    if (ld.train.empty()) throw data_error("training split is empty");
    fit_to_data(rc, ld);
    rc.validate();
    write_stamp(rc, rc.paths.out);

    std::vector<std::int64_t> gs;
    std::stringstream ss(flag_or(args, "groups", "4,8,16,32,64,128"));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(tok, &pos);
            if (pos != tok.size() || v < 1) throw std::invalid_argument(tok);
            gs.push_back(v);
        } catch (const std::exception&) {
            throw config_error(cat("--groups entry \"", tok, "\" is not a positive integer"));
        }
    }
    if (gs.empty()) throw config_error("--groups needs at least one value");

    nlohmann::json rows = nlohmann::json::array();
    for (std::int64_t g : gs) {
        RunConfig rcg = rc;
        rcg.model.groups = g;
        if (rc.model.d_f % g != 0) {
            rows.push_back({{"groups", g},
                            {"valid", false},
                            {"reason", cat("d_f ", rc.model.d_f, " not divisible by ", g, " groups")}});
            continue;
        }
        rcg.validate();
        with_precision(rcg.train.precision, [&](auto tag) {
            using S = decltype(tag);
            auto out = run_train<S>(rcg, ld, "", "", true);
            rows.push_back({{"groups", g},
                            {"valid", true},
                            {"mAP", out.report.map},
                            {"rank1", out.report.cmc.empty() ? 0.0 : out.report.cmc[0]},
                            {"final_loss", static_cast<double>(out.res.loss_history.back())},
                            {"config_hash", config_hash(rcg)}});
            return 0;
        });
    }
    nlohmann::json table{{"command", "ablate-groups"}, {"tool_version", kVersion}, {"rows", rows}};
    write_json(table, (std::filesystem::path(rc.paths.out) / "ablate_groups.json").string());
    std::cout << table.dump() << "\n";
    return 0;
}

inline int cmd_ablate_loss(const ParsedArgs& args) {
    check_flags(args, {"config", "data", "out"}, {"data", "out"});
    auto rc = resolve_config(flag_or(args, "config"), args.sets);
    rc.paths.data = args.flags.at("data");
    rc.paths.out = args.flags.at("out");
    auto ld = load_data(rc.paths.data);
    if (ld.train.empty()) throw data_error("training split is empty");
    fit_to_data(rc, ld);
    rc.validate();
    write_stamp(rc, rc.paths.out);

    nlohmann::json rows = nlohmann::json::array();
    for (const std::string variant : {"supcon", "triplet", "none"}) {
        RunConfig rcv = rc;
        rcv.loss.contrastive = variant;
        rcv.validate();
        with_precision(rcv.train.precision, [&](auto tag) {
            using S = decltype(tag);
            auto out = run_train<S>(rcv, ld, "", "", true);
            rows.push_back({{"contrastive", variant},
                            {"mAP", out.report.map},
                            {"rank1", out.report.cmc.empty() ? 0.0 : out.report.cmc[0]},
                            {"final_loss", static_cast<double>(out.res.loss_history.back())},
                            {"config_hash", config_hash(rcv)}});
            return 0;
        });
    }
    nlohmann::json table{{"command", "ablate-loss"}, {"tool_version", kVersion}, {"rows", rows}};
    write_json(table, (std::filesystem::path(rc.paths.out) / "ablate_loss.json").string());
    std::cout << table.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// verify: the oracle suite packaged into the binary
// ---------------------------------------------------------------------------

namespace verify {

struct Check {
    std::string name;
    bool ok = false;
    double seconds = 0.0;
    std::string detail;
};

template <typename Fn>
Check timed(const std::string& name, Fn&& fn) {
    Check c;
    c.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        c.detail = fn(c.ok);
    } catch (const std::exception& e) {
        c.ok = false;
        c.detail = e.what();
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return c;
}

inline TensorPtr<double> rand_param(ParamSet<double>& ps, const std::string& name,
                                    std::vector<std::int64_t> shape, Rng& rng, double s = 0.5) {
    auto t = randn<double>(shape, rng, s);
    t->requires_grad = true;
    ps.add(name, t);
    return t;
}

inline std::string grad_line(const GradCheckReport<double>& rep) {
    return cat("max rel err ", rep.max_rel_err, " at ", rep.worst_param, "[", rep.worst_index, "]");
}

// Weighted scalar readout; a plain mean has zero gradient through any op that
// removes per-column shifts.
inline TensorPtr<double> readout(const TensorPtr<double>& out, std::uint64_t seed = 99) {
    Rng rng(seed);
    auto w = randn<double>(out->shape, rng);
    return ops::mean_all(ops::mul(out, w));
}

inline std::vector<Check> gradient_checks(bool perturb) {
    std::vector<Check> out;

    out.push_back(timed("gradient: matmul+linear", [&](bool& ok) {
        Rng rng(3);
        ParamSet<double> ps;
        auto a = rand_param(ps, "a", {3, 4}, rng);
        auto w = rand_param(ps, "w", {4, 5}, rng);
        auto b = rand_param(ps, "b", {5}, rng);
        auto rep = grad_check<double>(ps, [&] { return ops::mean_all(ops::linear(a, w, b)); });
        ok = rep.ok(1e-6);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: conv2d", [&](bool& ok) {
        Rng rng(4);
        ParamSet<double> ps;
        auto x = rand_param(ps, "x", {2, 2, 6, 6}, rng);
        auto w = rand_param(ps, "w", {3, 2, 3, 3}, rng);
        auto b = rand_param(ps, "b", {3}, rng);
        auto rep = grad_check<double>(ps, [&] { return ops::mean_all(ops::conv2d(x, w, b, 2, 1)); });
        ok = rep.ok(1e-6);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: relu+gelu", [&](bool& ok) {
        Rng rng(5);
        ParamSet<double> ps;
        auto x = rand_param(ps, "x", {4, 6}, rng);
        auto rep = grad_check<double>(ps, [&] { return ops::mean_all(ops::gelu(ops::relu(x))); });
        ok = rep.ok(1e-4);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: batch_norm", [&](bool& ok) {
        Rng rng(6);
        ParamSet<double> ps;
        auto x = rand_param(ps, "x", {5, 3}, rng);
        auto g = rand_param(ps, "g", {3}, rng);
        auto b = rand_param(ps, "b", {3}, rng);
        auto rep = grad_check<double>(ps, [&] {
            ops::BNState<double> st(3);
            return readout(ops::batch_norm(x, g, b, st, true));
        });
        ok = rep.ok(1e-4);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: smooth_ce", [&](bool& ok) {
        Rng rng(7);
        ParamSet<double> ps;
        auto z = rand_param(ps, "z", {4, 5}, rng);
        auto rep = grad_check<double>(ps, [&] { return smooth_ce(z, {0, 2, 4, 1}, 0.1); });
        ok = rep.ok(1e-4);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: supcon", [&](bool& ok) {
        Rng rng(8);
        ParamSet<double> ps;
        auto f = rand_param(ps, "f", {4, 6}, rng);
        auto rep = grad_check<double>(ps, [&] { return supcon(f, {0, 0, 1, 1}, 0.2); });
        ok = rep.ok(1e-4);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: grouped gating", [&](bool& ok) {
        Rng rng(9);
        ParamSet<double> ps;
        Afem<double> afem(6, 8, 4);
        afem.init_params(ps, rng);
        auto ts = rand_param(ps, "ts", {3, 6}, rng);
        {
            NoGradGuard ng;
            afem_forward(ps, afem, ts, true);
        }
        auto rep = grad_check<double>(ps, [&] {
            return readout(afem_forward(ps, afem, ts, false));
        });
        ok = rep.ok(1e-4);
        return grad_line(rep);
    }));

    out.push_back(timed("gradient: composed model loss", [&](bool& ok) {
        Rng rng(10);
        ModelConfig mc;
        mc.appearance.stages = {{4, 3, 2}, {8, 3, 2}};
        mc.appearance.input_h = 8;
        mc.appearance.input_w = 8;
        mc.semantic.mode = SemanticMode::random_projection;
        mc.semantic.d_s = 6;
        mc.semantic.proj_grid = 4;
        mc.d_f = 12;
        mc.groups = 3;
        mc.num_ids = 2;
        Model<double> model(mc);
        ParamSet<double> ps;
        model.init_params(ps, rng);
        BatchInput<double> in;
        in.images = randn<double>({4, 3, 8, 8}, rng, 0.5);
        for (int i = 0; i < 4; ++i) {
            in.keys.push_back(cat("k", i));
            in.labels.push_back(i % 2);
            in.camera_ids.push_back(0);
            in.viewpoint_ids.push_back(0);
        }
        LossConfig lc;
        // one training-mode pass populates the normalization statistics; the
        // check then differentiates at those fixed constants, where every
        // parameter has a finite-difference-measurable gradient (train-mode
        // batch statistics make pre-norm biases exactly gradient-free, so a
        // central difference there reads only rounding noise)
        {
            NoGradGuard ng;
            model.forward(ps, in, true);
        }
        auto rep = grad_check<double>(ps, [&] {
            auto bundle = model.forward(ps, in, false);
            return total_loss(bundle.logits, bundle.t, in.labels, lc);
        });
        ok = rep.ok(1e-4);
        return grad_line(rep);
    }));

    if (perturb) {
        // fixture: a term the graph cannot see leaks into the forward value,
        // so the checker must flag the op and name the parameter
        out.push_back(timed("gradient: relu (perturbed fixture)", [&](bool& ok) {
            Rng rng(11);
            ParamSet<double> ps;
            auto x = rand_param(ps, "relu/x", {4}, rng);
            auto rep = grad_check<double>(ps, [&] {
                auto y = ops::mean_all(ops::relu(x));
                return ops::add(y, scalar<double>(0.05 * x->data[0]));
            });
            ok = rep.ok(1e-4);
            return grad_line(rep);
        }));
    }
    return out;
}

inline std::vector<Check> loss_checks() {
    std::vector<Check> out;

    out.push_back(timed("loss: uniform logits give log C", [&](bool& ok) {
        auto z = zeros<double>({2, 4});
        const double want = std::log(4.0);
        const double a = smooth_ce(z, std::vector<std::int64_t>{1, 3}, 0.0)->value();
        const double b = smooth_ce(z, std::vector<std::int64_t>{1, 3}, 0.1)->value();
        ok = std::abs(a - want) <= 1e-9 && std::abs(b - want) <= 1e-9;
        return cat("eps 0: ", a, ", eps 0.1: ", b, ", want ", want);
    }));

    out.push_back(timed("loss: zero smoothing equals plain cross-entropy", [&](bool& ok) {
        Rng rng(21);
        double worst = 0.0;
        for (int it = 0; it < 100; ++it) {
            const std::int64_t n = 3, c = 5;
            auto z = randn<double>({n, c}, rng, 2.0);
            std::vector<std::int64_t> labels(n);
            for (auto& l : labels) l = rng.uniform_int(c);
            double want = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                double mx = z->at(i, 0);
                for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, z->at(i, j));
                double lse = 0.0;
                for (std::int64_t j = 0; j < c; ++j) lse += std::exp(z->at(i, j) - mx);
                want += mx + std::log(lse) - z->at(i, labels[static_cast<std::size_t>(i)]);
            }
            want /= static_cast<double>(n);
            worst = std::max(worst, std::abs(smooth_ce(z, labels, 0.0)->value() - want));
        }
        ok = worst <= 1e-12;
        return cat("worst |diff| ", worst);
    }));

    out.push_back(timed("loss: supcon closed forms", [&](bool& ok) {
        auto same = make_tensor<double>({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
        const double a = supcon(same, {0, 0, 1, 1}, 0.07)->value();
        auto ortho = make_tensor<double>({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
        const double b = supcon(ortho, {0, 0, 1, 1}, 1.0)->value();
        const double wa = std::log(3.0);
        const double wb = std::log(1.0 + 2.0 * std::exp(-1.0));
        ok = std::abs(a - wa) <= 1e-9 && std::abs(b - wb) <= 1e-9;
        return cat("identical: ", a, " want ", wa, "; orthogonal: ", b, " want ", wb);
    }));

    return out;
}

// dense brute-force AP/CMC, kept deliberately simple
struct MetricOracle {
    double map = 0.0;
    std::vector<double> cmc;
    std::int64_t valid = 0;
};

inline MetricOracle brute_force_metrics(const TensorPtr<double>& d,
                                        const std::vector<std::int64_t>& qid,
                                        const std::vector<std::int64_t>& gid,
                                        const std::vector<std::int64_t>& qcam,
                                        const std::vector<std::int64_t>& gcam, bool filter,
                                        std::int64_t max_rank) {
    MetricOracle o;
    o.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
    const std::int64_t q = d->shape[0], g = d->shape[1];
    double ap_total = 0.0;
    for (std::int64_t i = 0; i < q; ++i) {
        std::vector<std::pair<double, std::int64_t>> row;
        for (std::int64_t j = 0; j < g; ++j) {
            if (filter && gid[static_cast<std::size_t>(j)] == qid[static_cast<std::size_t>(i)] &&
                gcam[static_cast<std::size_t>(j)] == qcam[static_cast<std::size_t>(i)])
                continue;
            row.emplace_back(d->data[static_cast<std::size_t>(i * g + j)], j);
        }
        std::stable_sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
            return a.first < b.first;
        });
        std::int64_t total = 0;
        for (const auto& [dist, j] : row)
            if (gid[static_cast<std::size_t>(j)] == qid[static_cast<std::size_t>(i)]) ++total;
        if (total == 0) continue;
        ++o.valid;
        double ap = 0.0;
        std::int64_t rel = 0;
        int hit = 0;
        for (std::size_t k = 0; k < row.size(); ++k) {
            const bool r =
                gid[static_cast<std::size_t>(row[k].second)] == qid[static_cast<std::size_t>(i)];
            if (r) {
                ++rel;
                ap += static_cast<double>(rel) / static_cast<double>(k + 1);
            }
            if (static_cast<std::int64_t>(k) < max_rank) {
                if (r) hit = 1;
                o.cmc[k] += hit;
            }
        }
        for (std::int64_t r = static_cast<std::int64_t>(row.size()); r < max_rank; ++r)
            o.cmc[static_cast<std::size_t>(r)] += hit;
        ap_total += ap / static_cast<double>(total);
    }
    for (auto& v : o.cmc) v /= static_cast<double>(o.valid);
    o.map = ap_total / static_cast<double>(o.valid);
    return o;
}

inline std::vector<Check> metric_checks() {
    std::vector<Check> out;

    out.push_back(timed("metric: cmc/map equals brute force", [&](bool& ok) {
        Rng rng(31);
        double worst = 0.0;
        for (int it = 0; it < 25; ++it) {
            const std::int64_t q = 6, g = 10;
            std::vector<double> dv(static_cast<std::size_t>(q * g));
            for (auto& v : dv) v = rng.uniform();
            std::vector<std::int64_t> qid(q), gid(g), qcam(q), gcam(g);
            for (auto& v : qid) v = rng.uniform_int(4);
            for (auto& v : gid) v = rng.uniform_int(4);
            for (auto& v : qcam) v = rng.uniform_int(3);
            for (auto& v : gcam) v = rng.uniform_int(3);
            gid[0] = qid[0];
            gcam[0] = (qcam[0] + 1) % 3;
            auto d = make_tensor<double>({q, g}, std::move(dv));
            EvalProtocol proto;
            proto.cross_camera_filter = (it % 2 == 0);
            proto.max_rank = 10;
            auto rep = cmc_map(d, qid, gid, qcam, gcam, proto);
            auto ora = brute_force_metrics(d, qid, gid, qcam, gcam, proto.cross_camera_filter, 10);
            if (rep.num_valid_queries != ora.valid) {
                ok = false;
                return std::string("valid-query counts disagree");
            }
            worst = std::max(worst, std::abs(rep.map - ora.map));
            for (std::size_t r = 0; r < ora.cmc.size(); ++r)
                worst = std::max(worst, std::abs(rep.cmc[r] - ora.cmc[r]));
        }
        ok = worst <= 1e-12;
        return cat("worst |diff| ", worst);
    }));

    out.push_back(timed("metric: rerank lambda=1 is the identity", [&](bool& ok) {
        Rng rng(32);
        auto fq = randn<double>({3, 4}, rng, 1.0);
        auto fg = randn<double>({6, 4}, rng, 1.0);
        auto dqg = distance_matrix(fq, fg, "euclidean_on_normalized");
        auto dqq = distance_matrix(fq, fq, "euclidean_on_normalized");
        auto dgg = distance_matrix(fg, fg, "euclidean_on_normalized");
        auto r = k_reciprocal_rerank(dqg, dqq, dgg, 3, 2, 1.0);
        ok = r->data == dqg->data;
        return std::string(ok ? "bitwise equal" : "differs from input");
    }));

    out.push_back(timed("metric: rerank equals dense oracle", [&](bool& ok) {
        Rng rng(33);
        auto fq = randn<double>({3, 4}, rng, 1.0);
        auto fg = randn<double>({5, 4}, rng, 1.0);
        auto dqg = distance_matrix(fq, fg, "euclidean_on_normalized");
        auto dqq = distance_matrix(fq, fq, "euclidean_on_normalized");
        auto dgg = distance_matrix(fg, fg, "euclidean_on_normalized");
        const std::int64_t k1 = 3, k2 = 2, q = 3, g = 5, n = q + g;
        const double lambda = 0.3;

        // dense transliteration of the published procedure
        std::vector<std::vector<double>> D(static_cast<std::size_t>(n),
                                           std::vector<double>(static_cast<std::size_t>(n), 0.0));
        for (std::int64_t i = 0; i < q; ++i)
            for (std::int64_t j = 0; j < q; ++j)
                D[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    dqq->data[static_cast<std::size_t>(i * q + j)];
        for (std::int64_t i = 0; i < q; ++i)
            for (std::int64_t j = 0; j < g; ++j) {
                const double v = dqg->data[static_cast<std::size_t>(i * g + j)];
                D[static_cast<std::size_t>(i)][static_cast<std::size_t>(q + j)] = v;
                D[static_cast<std::size_t>(q + j)][static_cast<std::size_t>(i)] = v;
            }
        for (std::int64_t i = 0; i < g; ++i)
            for (std::int64_t j = 0; j < g; ++j)
                D[static_cast<std::size_t>(q + i)][static_cast<std::size_t>(q + j)] =
                    dgg->data[static_cast<std::size_t>(i * g + j)];
        auto knn = [&](std::int64_t i, std::int64_t k) {
            std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
            std::iota(idx.begin(), idx.end(), 0);
            std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
                return D[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] <
                       D[static_cast<std::size_t>(i)][static_cast<std::size_t>(b)];
            });
            idx.resize(static_cast<std::size_t>(std::min(n, k + 1)));
            return idx;
        };
        auto recip = [&](std::int64_t i, std::int64_t k) {
            std::set<std::int64_t> r;
            for (std::int64_t j : knn(i, k)) {
                auto back = knn(j, k);
                if (std::count(back.begin(), back.end(), i)) r.insert(j);
            }
            return r;
        };
        std::vector<std::vector<double>> V(static_cast<std::size_t>(n),
                                           std::vector<double>(static_cast<std::size_t>(n), 0.0));
        for (std::int64_t i = 0; i < n; ++i) {
            auto base = recip(i, k1);
            auto star = base;
            for (std::int64_t j : base) {
                auto cand = recip(j, k1 / 2);
                std::int64_t inter = 0;
                for (std::int64_t x : cand) inter += base.count(x);
                if (3 * inter > 2 * static_cast<std::int64_t>(cand.size()))
                    for (std::int64_t x : cand) star.insert(x);
            }
            double tot = 0.0;
            for (std::int64_t j : star)
                tot += std::exp(-D[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
            for (std::int64_t j : star)
                V[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    std::exp(-D[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) / tot;
        }
        std::vector<std::vector<double>> Vq(static_cast<std::size_t>(n),
                                            std::vector<double>(static_cast<std::size_t>(n), 0.0));
        for (std::int64_t i = 0; i < n; ++i) {
            auto nn = knn(i, k2 - 1);
            for (std::int64_t j : nn)
                for (std::int64_t c = 0; c < n; ++c)
                    Vq[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] +=
                        V[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)] /
                        static_cast<double>(nn.size());
        }
        auto got = k_reciprocal_rerank(dqg, dqq, dgg, k1, k2, lambda);
        double worst = 0.0;
        for (std::int64_t i = 0; i < q; ++i)
            for (std::int64_t j = 0; j < g; ++j) {
                double mn = 0.0, mx = 0.0;
                for (std::int64_t c = 0; c < n; ++c) {
                    mn += std::min(Vq[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)],
                                   Vq[static_cast<std::size_t>(q + j)][static_cast<std::size_t>(c)]);
                    mx += std::max(Vq[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)],
                                   Vq[static_cast<std::size_t>(q + j)][static_cast<std::size_t>(c)]);
                }
                const double want =
                    lambda * dqg->data[static_cast<std::size_t>(i * g + j)] +
                    (1.0 - lambda) * (mx > 0.0 ? 1.0 - mn / mx : 1.0);
                worst = std::max(
                    worst, std::abs(got->data[static_cast<std::size_t>(i * g + j)] - want));
            }
        ok = worst <= 1e-10;
        return cat("worst |diff| ", worst);
    }));

    return out;
}

inline std::vector<Check> checkpoint_checks(const std::string& scratch_dir) {
    std::vector<Check> out;
    const auto dir = std::filesystem::path(scratch_dir);
    std::filesystem::create_directories(dir);

    out.push_back(timed("checkpoint: save-load-save is byte-identical", [&](bool& ok) {
        Rng rng(41);
        ParamSet<double> ps;
        ps.add("w", randn<double>({3, 4}, rng, 1.0));
        ps.add("b", zeros<double>({4}));
        CheckpointMeta meta;
        meta.config = R"({"verify":true})";
        meta.epoch = 1;
        const auto p1 = (dir / "verify_a.bin").string();
        const auto p2 = (dir / "verify_b.bin").string();
        checkpoint_save(ps, {}, meta, p1);
        auto ck = checkpoint_load<double>(p1);
        ParamSet<double> ps2;
        ps2.add("w", zeros<double>({3, 4}));
        ps2.add("b", zeros<double>({4}));
        restore_checkpoint<double>(ps2, {}, nullptr, ck);
        checkpoint_save(ps2, {}, ck.meta, p2);
        auto slurp = [](const std::string& p) {
            std::ifstream in(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        };
        ok = slurp(p1) == slurp(p2) && !slurp(p1).empty();
        return std::string(ok ? "identical bytes" : "byte mismatch");
    }));

    out.push_back(timed("checkpoint: corruption is detected", [&](bool& ok) {
        const auto p1 = (dir / "verify_a.bin").string();
        const auto p3 = (dir / "verify_c.bin").string();
        std::ifstream in(p1, std::ios::binary);
        std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        bytes[bytes.size() - 3] ^= 0x40;
        std::ofstream f(p3, std::ios::binary);
        f << bytes;
        f.close();
        try {
            checkpoint_load<double>(p3);
            ok = false;
            return std::string("corrupt payload loaded without complaint");
        } catch (const data_error& e) {
            ok = std::string(e.what()).find("checksum") != std::string::npos;
            return std::string(e.what());
        }
    }));

    return out;
}

}  // namespace verify

inline int cmd_verify(const ParsedArgs& args) {
    check_flags(args, {"out", "perturb-gradient"}, {});
    const bool perturb = args.flags.count("perturb-gradient") > 0;
    const std::string out_dir = flag_or(args, "out");
    if (!out_dir.empty()) write_stamp(RunConfig{}, out_dir);

    std::vector<verify::Check> checks;
    auto run = [&](std::vector<verify::Check> batch) {
        for (auto& c : batch) {
            std::cerr << (c.ok ? "[PASS] " : "[FAIL] ") << c.name << " (" << c.seconds << "s) "
                      << c.detail << "\n";
            checks.push_back(std::move(c));
        }
    };
    run(verify::gradient_checks(perturb));
    run(verify::loss_checks());
    run(verify::metric_checks());
    const std::string scratch =
        out_dir.empty()
            ? (std::filesystem::temp_directory_path() / "csen_verify").string()
            : out_dir;
    run(verify::checkpoint_checks(scratch));

    std::size_t failed = 0;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : checks) {
        if (!c.ok) ++failed;
        rows.push_back({{"name", c.name}, {"ok", c.ok}, {"seconds", c.seconds}, {"detail", c.detail}});
    }
    nlohmann::json report{{"command", "verify"},
                          {"tool_version", kVersion},
                          {"passed", checks.size() - failed},
                          {"failed", failed},
                          {"checks", rows}};
    if (!out_dir.empty())
        write_json(report, (std::filesystem::path(out_dir) / "verify.json").string());
    std::cout << report.dump() << "\n";
    return failed == 0 ? 0 : 1;
}

inline int dispatch(const ParsedArgs& args) {
    if (args.command == "synth") return cmd_synth(args);
    if (args.command == "train") return cmd_train(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "rerank") return cmd_rerank(args);
    if (args.command == "ablate-groups") return cmd_ablate_groups(args);
    if (args.command == "ablate-loss") return cmd_ablate_loss(args);
    if (args.command == "export-embeddings") return cmd_export_embeddings(args);
    if (args.command == "verify") return cmd_verify(args);
    throw config_error(cat("unknown command \"", args.command,
                           "\"; expected synth, train, eval, rerank, ablate-groups, ablate-loss, "
                           "export-embeddings or verify"));
}

}  // namespace cli_detail

// Entry point shared by the binary and the test suite. Exit codes: 0 success,
// 1 runtime failure, 2 configuration or usage error.
inline int cli_main(const std::vector<std::string>& args) {
    try {
        return cli_detail::dispatch(cli_detail::parse_args(args));
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace csen
