#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csen/common.hpp"
#include "csen/rng.hpp"
#include "csen/tensor.hpp"

namespace csen {

// ---------------------------------------------------------------------------
// samples and manifests
// ---------------------------------------------------------------------------

enum class Split { train, query, gallery };

inline const char* split_to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::query: return "query";
        case Split::gallery: return "gallery";
    }
    throw error("corrupt split value");
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "query") return Split::query;
    if (s == "gallery") return Split::gallery;
    throw data_error(cat("unknown split \"", s, "\""));
}

struct Sample {
    std::string key;
    std::string image_path;  // kept verbatim; resolved against a root at decode time
    std::int64_t id = 0;
    std::int64_t camera = 0;
    std::int64_t viewpoint = 0;
    Split split = Split::train;

    friend bool operator==(const Sample&, const Sample&) = default;
};

using Dataset = std::vector<Sample>;

namespace detail {

inline std::int64_t json_int_field(const nlohmann::json& j, const char* name, std::size_t lineno) {
    if (!j.contains(name) || !j.at(name).is_number_integer())
        throw data_error(cat("manifest line ", lineno, ": missing or non-integer field \"", name, "\""));
    return j.at(name).get<std::int64_t>();
}

inline std::string json_str_field(const nlohmann::json& j, const char* name, std::size_t lineno) {
    if (!j.contains(name) || !j.at(name).is_string())
        throw data_error(cat("manifest line ", lineno, ": missing or non-string field \"", name, "\""));
    return j.at(name).get<std::string>();
}

}  // namespace detail

inline Dataset load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(cat("cannot open manifest ", path));
    Dataset out;
    std::map<std::string, std::size_t> first_line_of;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error(cat("manifest line ", lineno, ": malformed JSON: ", e.what()));
        }
        if (!j.is_object()) throw data_error(cat("manifest line ", lineno, ": expected a JSON object"));
        Sample s;
        s.key = detail::json_str_field(j, "key", lineno);
        s.image_path = detail::json_str_field(j, "image_path", lineno);
        s.id = detail::json_int_field(j, "id", lineno);
        s.camera = detail::json_int_field(j, "camera", lineno);
        s.viewpoint = detail::json_int_field(j, "viewpoint", lineno);
        if (s.id < 0) throw data_error(cat("manifest line ", lineno, ": negative id ", s.id));
        if (s.camera < 0 || s.viewpoint < 0)
            throw data_error(cat("manifest line ", lineno, ": negative camera or viewpoint"));
        try {
            s.split = split_from_string(detail::json_str_field(j, "split", lineno));
        } catch (const data_error& e) {
            throw data_error(cat("manifest line ", lineno, ": ", e.what()));
        }
        auto [it, fresh] = first_line_of.emplace(s.key, lineno);
        if (!fresh)
            throw data_error(
                cat("duplicate key \"", s.key, "\" at manifest lines ", it->second, " and ", lineno));
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_manifest(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(cat("cannot open ", path, " for writing"));
    for (const auto& s : ds) {
        out << "{\"key\":" << nlohmann::json(s.key).dump()
            << ",\"image_path\":" << nlohmann::json(s.image_path).dump() << ",\"id\":" << s.id
            << ",\"camera\":" << s.camera << ",\"viewpoint\":" << s.viewpoint << ",\"split\":\""
            << split_to_string(s.split) << "\"}\n";
    }
    if (!out) throw io_error(cat("failed writing manifest ", path));
}

inline Dataset filter_split(const Dataset& ds, Split sp) {
    Dataset out;
    for (const auto& s : ds)
        if (s.split == sp) out.push_back(s);
    return out;
}

// Stable-ordered (query, gallery) lists; every query id must have at least one
// gallery image.
inline std::pair<Dataset, Dataset> split_query_gallery(const Dataset& ds) {
    Dataset q = filter_split(ds, Split::query);
    Dataset g = filter_split(ds, Split::gallery);
    std::set<std::int64_t> gallery_ids;
    for (const auto& s : g) gallery_ids.insert(s.id);
    for (const auto& s : q)
        if (!gallery_ids.count(s.id))
            throw data_error(cat("query id ", s.id, " has no gallery image"));
    return {std::move(q), std::move(g)};
}

// ---------------------------------------------------------------------------
// PPM (P6) codec; the one mandatory image format
// ---------------------------------------------------------------------------

// Interleaved RGB, row-major; the exact byte layout a P6 payload uses.
struct ImageU8 {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<unsigned char> rgb;
};

namespace detail {

// Next header token; skips whitespace and '#' comments, consumes one trailing
// delimiter byte (the single whitespace separating the header from the payload).
inline std::string ppm_token(std::istream& in, const std::string& path) {
    int c = in.get();
    while (c != EOF && (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = in.get();
        c = in.get();
    }
    if (c == EOF) throw data_error(cat(path, ": truncated header"));
    std::string tok;
    while (c != EOF && c != ' ' && c != '\t' && c != '\r' && c != '\n') {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

inline std::int64_t ppm_int(std::istream& in, const std::string& path, const char* what) {
    const std::string tok = ppm_token(in, path);
    std::int64_t v = 0;
    for (char c : tok) {
        if (c < '0' || c > '9') throw data_error(cat(path, ": bad ", what, " \"", tok, "\""));
        v = v * 10 + (c - '0');
        if (v > 1'000'000'000) throw data_error(cat(path, ": bad ", what, " \"", tok, "\""));
    }
    if (tok.empty()) throw data_error(cat(path, ": bad ", what));
    return v;
}

}  // namespace detail

inline ImageU8 decode_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(cat("cannot open image ", path));
    const std::string magic = detail::ppm_token(in, path);
    if (magic != "P6") throw data_error(cat(path, ": bad magic \"", magic, "\", expected P6"));
    ImageU8 img;
    img.width = detail::ppm_int(in, path, "width");
    img.height = detail::ppm_int(in, path, "height");
    if (img.width < 1 || img.height < 1) throw data_error(cat(path, ": nonpositive dimensions"));
    const std::int64_t maxval = detail::ppm_int(in, path, "maxval");
    if (maxval != 255) throw data_error(cat(path, ": unsupported maxval ", maxval, ", expected 255"));
    const std::int64_t need = 3 * img.height * img.width;
    img.rgb.resize(static_cast<std::size_t>(need));
    in.read(reinterpret_cast<char*>(img.rgb.data()), need);
    if (in.gcount() != need)
        throw data_error(cat(path, ": truncated payload, got ", in.gcount(), " of ", need, " bytes"));
    return img;
}

inline void encode_ppm(const std::string& path, const ImageU8& img) {
    if (img.height < 1 || img.width < 1) throw shape_error("encode_ppm: nonpositive dimensions");
    if (img.rgb.size() != static_cast<std::size_t>(3 * img.height * img.width))
        throw shape_error(cat("encode_ppm: payload has ", img.rgb.size(), " bytes for ", img.width,
                              "x", img.height));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(cat("cannot open ", path, " for writing"));
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()),
              static_cast<std::streamsize>(img.rgb.size()));
    if (!out) throw io_error(cat("failed writing image ", path));
}

// Channel-major 3xHxW in [0,1], exact v/255 conversion.
template <typename S>
TensorPtr<S> image_to_tensor(const ImageU8& img) {
    auto t = zeros<S>({3, img.height, img.width});
    const std::int64_t hw = img.height * img.width;
    for (std::int64_t p = 0; p < hw; ++p)
        for (std::int64_t c = 0; c < 3; ++c)
            t->data[c * hw + p] = static_cast<S>(img.rgb[p * 3 + c]) / static_cast<S>(255);
    return t;
}

template <typename S>
TensorPtr<S> decode_image(const std::string& path) {
    return image_to_tensor<S>(decode_ppm(path));
}

inline std::string resolve_image_path(const std::string& root, const std::string& image_path) {
    std::filesystem::path p(image_path);
    if (p.is_absolute() || root.empty()) return image_path;
    return (std::filesystem::path(root) / p).string();
}

// Decode a batch of samples into NxCxHxW. Decodes run in parallel; each index
// is written by exactly one worker, and the first failure (by index) rethrows.
template <typename S>
TensorPtr<S> decode_batch(const std::string& root, const Dataset& samples, std::int64_t height,
                          std::int64_t width) {
    if (samples.empty()) throw data_error("decode_batch: empty sample list");
    const std::int64_t n = static_cast<std::int64_t>(samples.size());
    auto out = zeros<S>({n, 3, height, width});
    const std::int64_t per = 3 * height * width;
    std::vector<std::exception_ptr> errs(samples.size());
    parallel_for(n, [&](std::int64_t i) {
        try {
            ImageU8 img = decode_ppm(resolve_image_path(root, samples[i].image_path));
            if (img.height != height || img.width != width)
                throw data_error(cat("image for key \"", samples[i].key, "\" is ", img.width, "x",
                                     img.height, ", expected ", width, "x", height));
            const std::int64_t hw = height * width;
            S* dst = out->data.data() + i * per;
            for (std::int64_t p = 0; p < hw; ++p)
                for (std::int64_t c = 0; c < 3; ++c)
                    dst[c * hw + p] = static_cast<S>(img.rgb[p * 3 + c]) / static_cast<S>(255);
        } catch (...) {
            errs[static_cast<std::size_t>(i)] = std::current_exception();
        }
    });
    for (const auto& e : errs)
        if (e) std::rethrow_exception(e);
    return out;
}

// ---------------------------------------------------------------------------
// synthetic vehicle corpus
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::int64_t num_ids = 200;
    std::int64_t images_per_id = 12;
    std::int64_t image_size = 64;
    std::int64_t num_cameras = 4;
    std::int64_t num_viewpoints = 2;
    std::int64_t palette_size = 12;
    std::int64_t motif_kinds = 6;  // available decal primitives, at most 6
    double noise_level = 0.15;
    std::uint64_t seed = 17;

    void validate() const {
        if (num_ids < 2) throw config_error("synth num_ids must be >= 2");
        if (images_per_id < 2) throw config_error("synth images_per_id must be >= 2");
        if (image_size < 16) throw config_error("synth image_size must be >= 16");
        if (num_cameras < 1 || num_viewpoints < 1)
            throw config_error("synth num_cameras and num_viewpoints must be >= 1");
        if (palette_size < 2) throw config_error("synth palette_size must be >= 2");
        if (motif_kinds < 1 || motif_kinds > 6)
            throw config_error("synth motif_kinds must be in [1, 6]");
        if (!(noise_level >= 0.0)) throw config_error("synth noise_level must be >= 0");
    }
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h -= std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) r = c, g = x;
    else if (hp < 2) r = x, g = c;
    else if (hp < 3) g = c, b = x;
    else if (hp < 4) g = x, b = c;
    else if (hp < 5) r = x, b = c;
    else r = c, b = x;
    const double m = v - c;
    return {r + m, g + m, b + m};
}

// Float canvas with a coverage mask; unmasked pixels become background later.
struct Canvas {
    std::int64_t h = 0, w = 0;
    std::vector<double> px;          // 3*h*w, channel-major
    std::vector<unsigned char> hit;  // h*w

    Canvas(std::int64_t hh, std::int64_t ww)
        : h(hh), w(ww), px(static_cast<std::size_t>(3 * hh * ww), 0.0),
          hit(static_cast<std::size_t>(hh * ww), 0) {}

    void set(std::int64_t y, std::int64_t x, const std::array<double, 3>& col) {
        if (y < 0 || y >= h || x < 0 || x >= w) return;
        for (int c = 0; c < 3; ++c) px[static_cast<std::size_t>((c * h + y) * w + x)] = col[c];
        hit[static_cast<std::size_t>(y * w + x)] = 1;
    }
};

inline void fill_rect(Canvas& cv, std::int64_t x0, std::int64_t x1, std::int64_t y0, std::int64_t y1,
                      const std::array<double, 3>& col) {
    for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x) cv.set(y, x, col);
}

inline void fill_circle(Canvas& cv, std::int64_t cx, std::int64_t cy, std::int64_t r,
                        const std::array<double, 3>& col) {
    for (std::int64_t y = cy - r; y <= cy + r; ++y)
        for (std::int64_t x = cx - r; x <= cx + r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) cv.set(y, x, col);
}

inline void fill_ring(Canvas& cv, std::int64_t cx, std::int64_t cy, std::int64_t r,
                      const std::array<double, 3>& col) {
    const std::int64_t inner = std::max<std::int64_t>(1, r - 2);
    for (std::int64_t y = cy - r; y <= cy + r; ++y)
        for (std::int64_t x = cx - r; x <= cx + r; ++x) {
            const std::int64_t d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            if (d2 <= r * r && d2 >= inner * inner) cv.set(y, x, col);
        }
}

inline void fill_diamond(Canvas& cv, std::int64_t cx, std::int64_t cy, std::int64_t r,
                         const std::array<double, 3>& col) {
    for (std::int64_t y = cy - r; y <= cy + r; ++y)
        for (std::int64_t x = cx - r; x <= cx + r; ++x)
            if (std::llabs(x - cx) + std::llabs(y - cy) <= r) cv.set(y, x, col);
}

struct Motif {
    int kind = 0;   // 0 circle, 1 block, 2 h-stripe, 3 v-stripe, 4 diamond, 5 ring
    int color = 0;  // palette index, never the base color
    int gx = 0;     // placement grid 16x8 inside the body
    int gy = 0;
    int size = 0;   // 0..3
};

struct Signature {
    int base = 0;
    std::vector<Motif> motifs;

    std::string text() const {
        std::string s = cat("b", base);
        for (const auto& m : motifs) s += cat(";", m.kind, ",", m.color, ",", m.gx, ",", m.gy, ",", m.size);
        return s;
    }
};

inline Signature make_signature(Rng& rng, const SynthConfig& cfg) {
    Signature sig;
    sig.base = static_cast<int>(rng.uniform_int(cfg.palette_size));
    const int n = 2 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < n; ++i) {
        Motif m;
        m.kind = static_cast<int>(rng.uniform_int(cfg.motif_kinds));
        m.color = static_cast<int>((sig.base + 1 + rng.uniform_int(cfg.palette_size - 1)) %
                                   cfg.palette_size);
        m.gx = static_cast<int>(rng.uniform_int(16));
        m.gy = static_cast<int>(rng.uniform_int(8));
        m.size = static_cast<int>(rng.uniform_int(4));
        sig.motifs.push_back(m);
    }
    return sig;
}

// Canonical pose: body + cabin + window + wheels, then the identity's decals.
inline Canvas draw_vehicle(const SynthConfig& cfg, const Signature& sig,
                           const std::vector<std::array<double, 3>>& palette) {
    const std::int64_t s = cfg.image_size;
    Canvas cv(s, s);
    const auto& base = palette[static_cast<std::size_t>(sig.base)];
    const std::array<double, 3> cabin{base[0] * 0.85, base[1] * 0.85, base[2] * 0.85};

    const std::int64_t bx0 = s * 9 / 64, bx1 = s * 55 / 64;
    const std::int64_t by0 = s * 30 / 64, by1 = s * 49 / 64;
    fill_rect(cv, bx0, bx1, by0, by1, base);

    const std::int64_t cy0 = s * 19 / 64, cy1 = s * 30 / 64;
    for (std::int64_t y = cy0; y < cy1; ++y) {
        const double t = static_cast<double>(y - cy0) / static_cast<double>(cy1 - cy0);
        const auto xl = static_cast<std::int64_t>(std::lround(s * (22.0 - 9.0 * t) / 64.0));
        const auto xr = static_cast<std::int64_t>(std::lround(s * (42.0 + 9.0 * t) / 64.0));
        for (std::int64_t x = xl; x < xr; ++x) cv.set(y, x, cabin);
    }
    fill_rect(cv, s * 24 / 64, s * 40 / 64, s * 21 / 64, s * 28 / 64, {0.75, 0.82, 0.88});

    const std::int64_t wy = s * 49 / 64, wr = s * 6 / 64;
    for (std::int64_t wx : {s * 18 / 64, s * 46 / 64}) {
        fill_circle(cv, wx, wy, wr, {0.07, 0.07, 0.07});
        fill_circle(cv, wx, wy, std::max<std::int64_t>(1, wr / 2), {0.35, 0.35, 0.35});
    }

    const std::int64_t mx0 = bx0 + 2, mx1 = bx1 - 2;
    const std::int64_t my0 = by0 + 2, my1 = by1 - 2;
    for (const auto& m : sig.motifs) {
        const auto& col = palette[static_cast<std::size_t>(m.color)];
        const std::int64_t px = mx0 + m.gx * (mx1 - mx0 - 1) / 15;
        const std::int64_t py = my0 + m.gy * (my1 - my0 - 1) / 7;
        const std::int64_t r = (2 + m.size) * s / 64;
        switch (m.kind) {
            case 0: fill_circle(cv, px, py, r, col); break;
            case 1: fill_rect(cv, px - r, px + r + 1, py - r, py + r + 1, col); break;
            case 2: fill_rect(cv, mx0, mx1, py - r / 2 - 1, py + r / 2 + 1, col); break;
            case 3: fill_rect(cv, px - r / 2 - 1, px + r / 2 + 1, my0, my1, col); break;
            case 4: fill_diamond(cv, px, py, r, col); break;
            default: fill_ring(cv, px, py, r + 1, col); break;
        }
    }
    return cv;
}

// Viewpoint 0 is the canonical pose, 1 a horizontal mirror, higher ids apply
// an increasing horizontal shear.
inline Canvas apply_viewpoint(const Canvas& in, std::int64_t v) {
    if (v == 0) return in;
    Canvas out(in.h, in.w);
    if (v == 1) {
        for (std::int64_t y = 0; y < in.h; ++y)
            for (std::int64_t x = 0; x < in.w; ++x) {
                const std::int64_t sx = in.w - 1 - x;
                if (!in.hit[static_cast<std::size_t>(y * in.w + sx)]) continue;
                std::array<double, 3> col;
                for (int c = 0; c < 3; ++c)
                    col[static_cast<std::size_t>(c)] =
                        in.px[static_cast<std::size_t>((c * in.h + y) * in.w + sx)];
                out.set(y, x, col);
            }
        return out;
    }
    const double shear = 0.1 * static_cast<double>(v - 1);
    for (std::int64_t y = 0; y < in.h; ++y) {
        const auto dx = static_cast<std::int64_t>(std::lround(shear * static_cast<double>(y - in.h / 2)));
        for (std::int64_t x = 0; x < in.w; ++x) {
            const std::int64_t sx = x - dx;
            if (sx < 0 || sx >= in.w) continue;
            if (!in.hit[static_cast<std::size_t>(y * in.w + sx)]) continue;
            std::array<double, 3> col;
            for (int c = 0; c < 3; ++c)
                col[static_cast<std::size_t>(c)] =
                    in.px[static_cast<std::size_t>((c * in.h + y) * in.w + sx)];
            out.set(y, x, col);
        }
    }
    return out;
}

inline ImageU8 compose_image(const Canvas& cv, const std::array<double, 3>& bg, Rng& rng,
                             double noise_level) {
    ImageU8 img;
    img.height = cv.h;
    img.width = cv.w;
    img.rgb.resize(static_cast<std::size_t>(3 * cv.h * cv.w));
    for (std::int64_t y = 0; y < cv.h; ++y)
        for (std::int64_t x = 0; x < cv.w; ++x) {
            const bool on = cv.hit[static_cast<std::size_t>(y * cv.w + x)] != 0;
            for (int c = 0; c < 3; ++c) {
                double v = on ? cv.px[static_cast<std::size_t>((c * cv.h + y) * cv.w + x)]
                              : bg[static_cast<std::size_t>(c)];
                if (noise_level > 0.0) v += rng.normal() * noise_level;
                v = std::clamp(v, 0.0, 1.0);
                img.rgb[static_cast<std::size_t>((y * cv.w + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    return img;
}

inline std::string zero_pad(std::int64_t v, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*lld", width, static_cast<long long>(v));
    return buf;
}

}  // namespace detail

// Saturated identity palette; backgrounds are light pastels so vehicle and
// background pixel values never coincide.
inline std::array<double, 3> synth_palette_color(const SynthConfig& cfg, std::int64_t i) {
    return detail::hsv_to_rgb(static_cast<double>(i) / static_cast<double>(cfg.palette_size), 0.85,
                              0.75);
}

inline std::array<double, 3> synth_background(const SynthConfig& cfg, std::int64_t camera) {
    return detail::hsv_to_rgb((static_cast<double>(camera) + 0.37) / static_cast<double>(cfg.num_cameras),
                              0.18, 0.92);
}

// Writes images/<key>.ppm plus manifest.jsonl under out_dir and returns the
// dataset with image paths relative to out_dir. Single-threaded by design so
// the corpus is byte-identical for a given seed.
inline Dataset synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    if (cfg.num_cameras < 2)
        throw config_error(
            "synth split is impossible: a cross-camera gallery image per query id needs >= 2 cameras");

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");

    std::vector<std::array<double, 3>> palette;
    for (std::int64_t i = 0; i < cfg.palette_size; ++i) palette.push_back(synth_palette_color(cfg, i));
    std::vector<std::array<double, 3>> bgs;
    for (std::int64_t c = 0; c < cfg.num_cameras; ++c) bgs.push_back(synth_background(cfg, c));

    // collision-checked signatures: re-draw with a bumped salt until distinct
    std::vector<detail::Signature> sigs;
    std::set<std::string> seen;
    for (std::int64_t id = 0; id < cfg.num_ids; ++id) {
        detail::Signature sig;
        bool placed = false;
        for (std::uint64_t salt = 0; salt < 1000; ++salt) {
            Rng rng(mix_seed(cfg.seed, 1, (static_cast<std::uint64_t>(id) << 10) | salt));
            sig = detail::make_signature(rng, cfg);
            if (seen.insert(sig.text()).second) {
                placed = true;
                break;
            }
        }
        if (!placed) throw error(cat("could not find a distinct signature for id ", id));
        sigs.push_back(std::move(sig));
    }

    Dataset ds;
    for (std::int64_t id = 0; id < cfg.num_ids; ++id) {
        const detail::Canvas canonical = detail::draw_vehicle(cfg, sigs[static_cast<std::size_t>(id)], palette);
        std::vector<detail::Canvas> views;
        for (std::int64_t v = 0; v < cfg.num_viewpoints; ++v)
            views.push_back(detail::apply_viewpoint(canonical, v));

        for (std::int64_t j = 0; j < cfg.images_per_id; ++j) {
            const std::int64_t cam = j % cfg.num_cameras;
            const std::int64_t vp = (j / cfg.num_cameras) % cfg.num_viewpoints;
            Rng noise_rng(mix_seed(cfg.seed, 2, static_cast<std::uint64_t>(id) * 1000003ULL +
                                                    static_cast<std::uint64_t>(j)));
            const ImageU8 img = detail::compose_image(views[static_cast<std::size_t>(vp)],
                                                      bgs[static_cast<std::size_t>(cam)], noise_rng,
                                                      cfg.noise_level);
            Sample s;
            s.key = cat("v", detail::zero_pad(id, 4), "_c", cam, "_u", vp, "_i", detail::zero_pad(j, 2));
            s.image_path = cat("images/", s.key, ".ppm");
            s.id = id;
            s.camera = cam;
            s.viewpoint = vp;
            s.split = j == 0 ? Split::query : (j <= 2 ? Split::gallery : Split::train);
            encode_ppm((fs::path(out_dir) / s.image_path).string(), img);
            ds.push_back(std::move(s));
        }
    }
    write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), ds);
    return ds;
}

}  // namespace csen
