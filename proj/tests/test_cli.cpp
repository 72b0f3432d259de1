#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "csen/cli.hpp"

using namespace csen;
using Catch::Matchers::ContainsSubstring;
using nlohmann::json;

namespace {

struct TempDir {
    std::filesystem::path path;

    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("csen_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json slurp_json(const std::string& path) { return json::parse(slurp(path)); }

int run(std::vector<std::string> args) { return cli_main(args); }

// Overrides shared by every training invocation: a model small enough that an
// epoch is a few milliseconds.
std::vector<std::string> tiny_profile() {
    return {
        "--set", "model.appearance.input_h=16",
        "--set", "model.appearance.input_w=16",
        "--set",
        "model.appearance.stages=[{\"channels\":8,\"kernel\":3,\"stride\":2},"
        "{\"channels\":16,\"kernel\":3,\"stride\":2}]",
        "--set", "model.semantic.mode=random_projection",
        "--set", "model.semantic.d_s=8",
        "--set", "model.semantic.proj_grid=8",
        "--set", "model.d_f=32",
        "--set", "model.groups=4",
        "--set", "train.P=2",
        "--set", "train.K=2",
        "--set", "train.epochs=2",
    };
}

void append(std::vector<std::string>& args, std::initializer_list<std::string> more) {
    args.insert(args.end(), more);
}

// 4 ids x 6 images at 16x16; the split rule leaves 3 train images per id.
int make_corpus(const std::string& dir, std::uint64_t seed = 5) {
    return run({"synth", "--out", dir, "--set", "synth.num_ids=4", "--set",
                "synth.images_per_id=6", "--set", "synth.image_size=16", "--set",
                "synth.num_cameras=2", "--set", "synth.noise_level=0.02", "--set",
                cat("synth.seed=", seed)});
}

int train_into(const std::string& data, const std::string& out,
               std::initializer_list<std::string> extra = {}) {
    auto args = tiny_profile();
    args.insert(args.begin(), {"train", "--data", data, "--out", out});
    append(args, extra);
    return run(args);
}

}  // namespace

// ---------------------------------------------------------------------------
// config document
// ---------------------------------------------------------------------------

TEST_CASE("run config round-trips through json as a fixed point") {
    RunConfig rc;
    rc.model.groups = 16;
    rc.train.lr = 0.003;
    rc.train.scheduler = "warmup_multistep";
    rc.train.milestones = {4, 8};
    rc.loss.contrastive = "triplet";
    rc.eval.rerank = true;
    rc.eval.rr.k1 = 9;
    rc.synth.num_ids = 7;
    rc.paths.data = "somewhere";

    auto j = rc.to_json();
    auto back = RunConfig::from_json(j);
    REQUIRE(back.to_json().dump() == j.dump());
    REQUIRE(back.model.groups == 16);
    REQUIRE(back.train.milestones == std::vector<std::int64_t>{4, 8});
    REQUIRE(back.loss.contrastive == "triplet");
    REQUIRE(back.eval.rr.k1 == 9);
    REQUIRE(back.paths.data == "somewhere");
}

TEST_CASE("default run config is the full system and validates") {
    RunConfig rc;
    REQUIRE(rc.model.use_sem);
    REQUIRE(rc.model.use_afem);
    REQUIRE(rc.model.side.enabled);
    REQUIRE_NOTHROW(rc.validate());
}

TEST_CASE("config loader rejects unknown fields with their dotted path") {
    auto doc = RunConfig{}.to_json();
    doc["model"]["appearance"]["bogus"] = 1;
    CHECK_THROWS_AS(RunConfig::from_json(doc), config_error);
    CHECK_THROWS_WITH(RunConfig::from_json(doc), ContainsSubstring("model.appearance.bogus"));

    auto doc2 = RunConfig{}.to_json();
    doc2["model"]["appearance"]["stages"][0]["padding"] = 1;
    CHECK_THROWS_WITH(RunConfig::from_json(doc2),
                      ContainsSubstring("model.appearance.stages[0].padding"));

    auto doc3 = RunConfig{}.to_json();
    doc3["verbosity"] = 3;
    CHECK_THROWS_WITH(RunConfig::from_json(doc3), ContainsSubstring("verbosity"));
}

TEST_CASE("config loader rejects wrong field types naming the path") {
    auto doc = RunConfig{}.to_json();
    doc["train"]["lr"] = "fast";
    CHECK_THROWS_AS(RunConfig::from_json(doc), config_error);
    CHECK_THROWS_WITH(RunConfig::from_json(doc),
                      ContainsSubstring("train.lr") && ContainsSubstring("wrong type"));
}

TEST_CASE("overrides descend dotted paths and parse values as json") {
    auto doc = RunConfig{}.to_json();
    apply_override(doc, "train.lr=0.25");
    apply_override(doc, "model.semantic.mode=mini_vit");
    apply_override(doc, "train.milestones=[2,4]");
    apply_override(doc, "paths.out=/tmp/somewhere");
    apply_override(doc, "eval.rerank.k1=11");

    auto rc = RunConfig::from_json(doc);
    REQUIRE(rc.train.lr == 0.25);
    REQUIRE(rc.model.semantic.mode == SemanticMode::mini_vit);
    REQUIRE(rc.train.milestones == std::vector<std::int64_t>{2, 4});
    REQUIRE(rc.paths.out == "/tmp/somewhere");
    // rerank was null; the override promotes it and k2/lambda keep defaults
    REQUIRE(rc.eval.rerank);
    REQUIRE(rc.eval.rr.k1 == 11);
    REQUIRE(rc.eval.rr.k2 == 6);

    CHECK_THROWS_WITH(apply_override(doc, "no_equals_sign"), ContainsSubstring("="));
}

TEST_CASE("resolve_config layers file under command-line overrides") {
    TempDir td;
    std::ofstream(td.file("run.json")) << R"({"train":{"epochs":5,"lr":0.01}})";
    auto rc = resolve_config(td.file("run.json"), {"train.epochs=3"});
    REQUIRE(rc.train.epochs == 3);
    REQUIRE(rc.train.lr == 0.01);

    CHECK_THROWS_AS(resolve_config(td.file("missing.json"), {}), io_error);
    std::ofstream(td.file("bad.json")) << "{nope";
    CHECK_THROWS_AS(resolve_config(td.file("bad.json"), {}), config_error);
}

TEST_CASE("config hash tracks semantics but not output locations") {
    RunConfig a, b;
    b.paths.data = "/somewhere/else";
    b.paths.out = "/another/place";
    REQUIRE(config_hash(a) == config_hash(b));

    RunConfig c;
    c.train.lr *= 2;
    REQUIRE(config_hash(a) != config_hash(c));
    REQUIRE(config_hash(a).size() == 16);
}

// ---------------------------------------------------------------------------
// synth + train commands
// ---------------------------------------------------------------------------

TEST_CASE("synth stamps its config and regenerates identical corpora") {
    TempDir td;
    REQUIRE(make_corpus(td.file("a")) == 0);
    REQUIRE(make_corpus(td.file("b")) == 0);

    auto stamp = slurp_json(td.file("a/config.json"));
    REQUIRE(stamp.contains("tool_version"));
    REQUIRE(stamp.contains("config_hash"));
    REQUIRE(stamp["config"]["synth"]["num_ids"] == 4);

    REQUIRE(slurp(td.file("a/manifest.jsonl")) == slurp(td.file("b/manifest.jsonl")));
    REQUIRE(std::filesystem::exists(td.file("a/images")));
}

TEST_CASE("train emits stamp, history and checkpoints") {
    TempDir td;
    REQUIRE(make_corpus(td.file("data")) == 0);
    REQUIRE(train_into(td.file("data"), td.file("run")) == 0);

    REQUIRE(std::filesystem::exists(td.file("run/config.json")));
    REQUIRE(std::filesystem::exists(td.file("run/checkpoint_final.bin")));

    auto hist = slurp_json(td.file("run/history.json"));
    REQUIRE(hist["lr"].size() == 2);
    REQUIRE(!hist["loss"].empty());
    for (const auto& v : hist["loss"]) REQUIRE(std::isfinite(v.get<double>()));

    auto stamp = slurp_json(td.file("run/config.json"));
    // classifier size comes from the data, not the config default
    REQUIRE(stamp["config"]["model"]["num_ids"] == 4);
}

TEST_CASE("two train runs into different directories are bit-identical") {
    TempDir td;
    REQUIRE(make_corpus(td.file("data")) == 0);
    REQUIRE(train_into(td.file("data"), td.file("a")) == 0);
    REQUIRE(train_into(td.file("data"), td.file("b")) == 0);

    REQUIRE(slurp(td.file("a/history.json")) == slurp(td.file("b/history.json")));
    REQUIRE(slurp(td.file("a/checkpoint_final.bin")) == slurp(td.file("b/checkpoint_final.bin")));
}

TEST_CASE("train resumes from a checkpoint to the straight-through bytes") {
    TempDir td;
    REQUIRE(make_corpus(td.file("data")) == 0);
    REQUIRE(train_into(td.file("data"), td.file("full"),
                       {"--set", "train.epochs=4", "--set", "train.checkpoint_every=2"}) == 0);
    REQUIRE(std::filesystem::exists(td.file("full/checkpoint_epoch0002.bin")));

    REQUIRE(train_into(td.file("data"), td.file("resumed"),
                       {"--set", "train.epochs=4", "--set", "train.checkpoint_every=2", "--resume",
                        td.file("full/checkpoint_epoch0002.bin")}) == 0);
    REQUIRE(slurp(td.file("full/checkpoint_final.bin")) ==
            slurp(td.file("resumed/checkpoint_final.bin")));
}

TEST_CASE("ablation flags strip the corresponding branches") {
    TempDir td;
    REQUIRE(make_corpus(td.file("data")) == 0);

    REQUIRE(train_into(td.file("data"), td.file("nosem"), {"--ablate", "no-sem"}) == 0);
    auto c1 = slurp_json(td.file("nosem/config.json"))["config"]["model"];
    REQUIRE(c1["use_sem"] == false);
    REQUIRE(c1["use_afem"] == false);

    REQUIRE(train_into(td.file("data"), td.file("noafem"), {"--ablate", "no-afem"}) == 0);
    auto c2 = slurp_json(td.file("noafem/config.json"))["config"]["model"];
    REQUIRE(c2["use_sem"] == true);
    REQUIRE(c2["use_afem"] == false);

    REQUIRE(train_into(td.file("data"), td.file("nocv"), {"--ablate", "no-cv"}) == 0);
    auto c3 = slurp_json(td.file("nocv/config.json"))["config"]["model"];
    REQUIRE(c3["side"]["enabled"] == false);

    REQUIRE(train_into(td.file("data"), td.file("bad"), {"--ablate", "everything"}) == 2);
}

// ---------------------------------------------------------------------------
// eval family
// ---------------------------------------------------------------------------

namespace {

// One shared tiny corpus + checkpoint for the read-only eval cases.
struct EvalFixture {
    TempDir td;
    std::string data, ck;

    EvalFixture() {
        data = td.file("data");
        REQUIRE(make_corpus(data) == 0);
        REQUIRE(train_into(data, td.file("run")) == 0);
        ck = td.file("run/checkpoint_final.bin");
    }
};

}  // namespace

TEST_CASE("eval writes a report with the resolved protocol") {
    EvalFixture fx;
    REQUIRE(run({"eval", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("e1")}) == 0);

    auto rep = slurp_json(fx.td.file("e1/report.json"));
    REQUIRE(rep.contains("mAP"));
    REQUIRE(rep["num_query"] == 4);
    REQUIRE(rep["protocol"]["rerank"].is_null());
    auto cmc = rep["cmc"].get<std::vector<double>>();
    for (std::size_t i = 1; i < cmc.size(); ++i) REQUIRE(cmc[i] >= cmc[i - 1]);

    // determinism: a second evaluation of the same checkpoint matches exactly
    REQUIRE(run({"eval", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("e2")}) == 0);
    REQUIRE(slurp(fx.td.file("e1/report.json")) == slurp(fx.td.file("e2/report.json")));
}

TEST_CASE("eval accepts an inline protocol override") {
    EvalFixture fx;
    REQUIRE(run({"eval", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("cos"),
                 "--protocol", R"({"metric":"cosine_distance"})"}) == 0);
    auto rep = slurp_json(fx.td.file("cos/report.json"));
    REQUIRE(rep["protocol"]["metric"] == "cosine_distance");

    REQUIRE(run({"eval", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("x"),
                 "--protocol", "{not json"}) == 2);
    REQUIRE(run({"eval", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("y"),
                 "--protocol", R"({"metric":"manhattan"})"}) == 2);
}

TEST_CASE("rerank writes baseline and reranked reports") {
    EvalFixture fx;
    REQUIRE(run({"rerank", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("rr"),
                 "--set", "eval.rerank.k1=3", "--set", "eval.rerank.k2=2"}) == 0);

    auto base = slurp_json(fx.td.file("rr/report_baseline.json"));
    auto rer = slurp_json(fx.td.file("rr/report.json"));
    REQUIRE(base["protocol"]["rerank"].is_null());
    REQUIRE(rer["protocol"]["rerank"]["k1"] == 3);
    REQUIRE(base["num_query"] == rer["num_query"]);

    // the baseline report matches a plain eval of the same checkpoint
    REQUIRE(run({"eval", "--checkpoint", fx.ck, "--data", fx.data, "--out", fx.td.file("pe")}) == 0);
    REQUIRE(base["mAP"] == slurp_json(fx.td.file("pe/report.json"))["mAP"]);
}

TEST_CASE("export-embeddings honors the split filter") {
    EvalFixture fx;
    REQUIRE(run({"export-embeddings", "--checkpoint", fx.ck, "--data", fx.data, "--out",
                 fx.td.file("emb"), "--split", "query"}) == 0);

    std::ifstream in(fx.td.file("emb/embeddings.jsonl"));
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        auto j = json::parse(line);
        REQUIRE(j["embedding"].size() == 32);
        ++lines;
    }
    REQUIRE(lines == 4);

    REQUIRE(run({"export-embeddings", "--checkpoint", fx.ck, "--data", fx.data, "--out",
                 fx.td.file("bad"), "--split", "everything"}) == 2);
}

// ---------------------------------------------------------------------------
// ablation harnesses
// ---------------------------------------------------------------------------

TEST_CASE("ablate-groups marks non-dividing group counts invalid and continues") {
    TempDir td;
    REQUIRE(make_corpus(td.file("data")) == 0);
    auto args = tiny_profile();
    args.insert(args.begin(),
                {"ablate-groups", "--data", td.file("data"), "--out", td.file("ag"), "--groups",
                 "2,3,4"});
    REQUIRE(run(args) == 0);

    auto table = slurp_json(td.file("ag/ablate_groups.json"));
    REQUIRE(table["rows"].size() == 3);
    REQUIRE(table["rows"][0]["valid"] == true);
    REQUIRE(table["rows"][1]["valid"] == false);
    REQUIRE_THAT(table["rows"][1]["reason"].get<std::string>(), ContainsSubstring("divisible"));
    REQUIRE(table["rows"][2]["valid"] == true);
    REQUIRE(table["rows"][0]["config_hash"] != table["rows"][2]["config_hash"]);
    for (const auto& row : table["rows"])
        if (row["valid"] == true) {
            REQUIRE(row["mAP"].get<double>() >= 0.0);
            REQUIRE(row["mAP"].get<double>() <= 1.0);
        }

    auto bad = tiny_profile();
    bad.insert(bad.begin(), {"ablate-groups", "--data", td.file("data"), "--out", td.file("agb"),
                             "--groups", "2,zero"});
    REQUIRE(run(bad) == 2);
}

TEST_CASE("ablate-loss emits one row per contrastive variant") {
    TempDir td;
    REQUIRE(make_corpus(td.file("data")) == 0);
    auto args = tiny_profile();
    args.insert(args.begin(), {"ablate-loss", "--data", td.file("data"), "--out", td.file("al")});
    REQUIRE(run(args) == 0);

    auto table = slurp_json(td.file("al/ablate_loss.json"));
    REQUIRE(table["rows"].size() == 3);
    std::vector<std::string> variants;
    for (const auto& row : table["rows"]) variants.push_back(row["contrastive"]);
    REQUIRE(variants == std::vector<std::string>{"supcon", "triplet", "none"});
}

// ---------------------------------------------------------------------------
// exit codes and verify
// ---------------------------------------------------------------------------

TEST_CASE("usage and config problems exit 2 while runtime failures exit 1") {
    TempDir td;
    REQUIRE(run({}) == 2);
    REQUIRE(run({"conjure"}) == 2);
    REQUIRE(run({"synth"}) == 2);                                // missing --out
    REQUIRE(run({"synth", "--out", td.file("x"), "--shiny", "1"}) == 2);  // unknown flag
    REQUIRE(run({"synth", "--out"}) == 2);                       // flag without value
    REQUIRE(run({"synth", td.file("x")}) == 2);                  // positional argument
    REQUIRE(run({"synth", "--out", td.file("x"), "--set", "synth.bogus=1"}) == 2);
    REQUIRE(run({"synth", "--out", td.file("x"), "--set", "synth.num_ids=0"}) == 2);

    REQUIRE(run({"eval", "--checkpoint", td.file("none.bin"), "--data", td.file("nope"), "--out",
                 td.file("o")}) == 1);
    REQUIRE(make_corpus(td.file("data")) == 0);
    REQUIRE(run({"train", "--data", td.file("data"), "--out", td.file("r"), "--resume",
                 td.file("none.bin")}) == 1);
}

TEST_CASE("verify passes clean and fails with a perturbed gradient") {
    TempDir td;
    REQUIRE(run({"verify", "--out", td.file("v")}) == 0);
    auto rep = slurp_json(td.file("v/verify.json"));
    REQUIRE(rep["failed"] == 0);
    REQUIRE(rep["passed"].get<int>() >= 14);

    REQUIRE(run({"verify", "--out", td.file("vp"), "--perturb-gradient"}) == 1);
    auto rep2 = slurp_json(td.file("vp/verify.json"));
    REQUIRE(rep2["failed"] == 1);
    bool found = false;
    for (const auto& c : rep2["checks"])
        if (c["ok"] == false) {
            REQUIRE_THAT(c["name"].get<std::string>(), ContainsSubstring("relu"));
            found = true;
        }
    REQUIRE(found);
}
