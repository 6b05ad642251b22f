#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "echolab/png_io.hpp"
#include "echolab/rng.hpp"

namespace echolab {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& vocab() {
    static const std::vector<std::string> words = {
        "<pad>",   "a",       "photo",  "of",     "the",    "on",      "background",
        "small",   "large",   "rotated", "bright", "dark",   "centered", "shifted",
        "scene",   "image",   "disk",   "square", "triangle", "star",
        "red",     "green",   "blue",   "yellow", "purple", "cyan",    "orange",
        "white",   "plain",   "stripes", "checker", "dots"};
    return words;
}

constexpr int kConceptTokenId = 32;  // one slot past the template vocabulary
constexpr int kShapeBase = 16, kColorBase = 20, kTextureBase = 28;
constexpr int kNumShapes = 4, kNumColors = 8, kNumTextures = 4;

inline std::string token_text(int id) {
    if (id == kConceptTokenId) return "<concept>";
    check(id >= 0 && id < static_cast<int>(vocab().size()), "bad token id");
    return vocab()[static_cast<size_t>(id)];
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); i++) {
        if (i) out += " ";
        out += token_text(ids[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// toy renderer
// ---------------------------------------------------------------------------

// Attribute tuple indices: (shape, color, texture).
using AttrTuple = std::array<int, 3>;

struct ToySpec {
    int canvas = 32;
    // attribute tuples reserved for personalization concepts; the corpus
    // never renders these
    std::vector<AttrTuple> held_out = {
        {0, 5, 3}, {3, 0, 2}, {2, 7, 1}, {1, 4, 0}, {3, 5, 0}, {0, 6, 2}};

    bool is_held_out(const AttrTuple& a) const {
        for (const auto& h : held_out)
            if (h == a) return true;
        return false;
    }
    std::vector<AttrTuple> allowed_tuples() const {
        std::vector<AttrTuple> out;
        for (int s = 0; s < kNumShapes; s++)
            for (int c = 0; c < kNumColors; c++)
                for (int t = 0; t < kNumTextures; t++) {
                    AttrTuple a{s, c, t};
                    if (!is_held_out(a)) out.push_back(a);
                }
        return out;
    }
};

template <class J>
void to_json(J& j, const ToySpec& s) {
    j = J{{"canvas", s.canvas}, {"held_out", s.held_out}};
}
template <class J>
void from_json(const J& j, ToySpec& s) {
    j.at("canvas").get_to(s.canvas);
    s.held_out.clear();
    for (const auto& h : j.at("held_out"))
        s.held_out.push_back({h[0].template get<int>(), h[1].template get<int>(),
                              h[2].template get<int>()});
}

namespace detail {

struct Rgb {
    double r, g, b;
};

inline Rgb fill_color(int idx) {
    static const Rgb table[kNumColors] = {
        {0.90, 0.15, 0.15}, {0.15, 0.80, 0.20}, {0.20, 0.30, 0.90},
        {0.95, 0.90, 0.20}, {0.60, 0.25, 0.80}, {0.20, 0.85, 0.85},
        {0.95, 0.55, 0.15}, {0.95, 0.95, 0.95}};
    return table[idx];
}

inline Rgb bg_base(int idx) {
    static const Rgb table[4] = {{0.12, 0.12, 0.15},
                                 {0.20, 0.16, 0.12},
                                 {0.10, 0.18, 0.14},
                                 {0.16, 0.10, 0.18}};
    return table[idx & 3];
}

inline double polygon_radius(double phi, int n, double R) {
    // boundary radius of a regular n-gon with circumradius R
    double seg = 2.0 * M_PI / n;
    double a = std::fmod(std::fmod(phi, seg) + seg, seg) - seg / 2.0;
    return R * std::cos(M_PI / n) / std::cos(a);
}

inline double star_radius(double phi, double R) {
    double u = std::fmod(std::fmod(phi * 5.0 / (2.0 * M_PI), 1.0) + 1.0, 1.0);
    double w = std::fabs(u * 2.0 - 1.0);  // 1 at spike tip, 0 between tips
    return R * (0.45 + 0.55 * w);
}

}  // namespace detail

// Renders one toy image in [0,1]: a colored shape over a textured background.
// Jitter (position, size, rotation, tone) comes from the provided generator.
inline Tensor render_toy(const ToySpec& spec, int shape, int color, int texture,
                         Rng& rng) {
    check(shape >= 0 && shape < kNumShapes && color >= 0 && color < kNumColors &&
              texture >= 0 && texture < kNumTextures,
          "render_toy: attribute index out of range");
    int N = spec.canvas;
    Tensor img({3, N, N});

    double cx = rng.uniform(N * 0.375, N * 0.625);
    double cy = rng.uniform(N * 0.375, N * 0.625);
    double rad = rng.uniform(N * 0.22, N * 0.34);
    double theta = rng.uniform(0.0, 2.0 * M_PI);
    detail::Rgb fc = detail::fill_color(color);
    double cjit = rng.uniform(-0.05, 0.05);
    fc.r = std::clamp(fc.r + cjit, 0.0, 1.0);
    fc.g = std::clamp(fc.g + cjit, 0.0, 1.0);
    fc.b = std::clamp(fc.b + cjit, 0.0, 1.0);

    detail::Rgb bg = detail::bg_base(static_cast<int>(rng.uniform_int(0, 3)));
    double bjit = rng.uniform(-0.03, 0.03);
    bg.r = std::clamp(bg.r + bjit, 0.0, 1.0);
    bg.g = std::clamp(bg.g + bjit, 0.0, 1.0);
    bg.b = std::clamp(bg.b + bjit, 0.0, 1.0);
    detail::Rgb bg2{std::clamp(bg.r + 0.13, 0.0, 1.0), std::clamp(bg.g + 0.13, 0.0, 1.0),
                    std::clamp(bg.b + 0.13, 0.0, 1.0)};
    bool vertical = rng.uniform() < 0.5;
    int phase = static_cast<int>(rng.uniform_int(0, 3));

    double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < N; y++) {
        for (int x = 0; x < N; x++) {
            // background texture
            detail::Rgb px = bg;
            switch (texture) {
                case 0: break;  // plain
                case 1: {       // stripes
                    int coord = (vertical ? x : y) + phase;
                    if ((coord / 4) % 2) px = bg2;
                    break;
                }
                case 2: {  // checker
                    if (((x + phase) / 4 + (y + phase) / 4) % 2) px = bg2;
                    break;
                }
                case 3: {  // dots
                    int gx = (x + phase) % 8 - 4, gy = (y + phase) % 8 - 4;
                    if (gx * gx + gy * gy <= 4) px = bg2;
                    break;
                }
            }
            // shape signed distance (rotated frame)
            double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            double u = dx * ct + dy * st, v = -dx * st + dy * ct;
            double d = 0.0;
            switch (shape) {
                case 0: d = std::sqrt(u * u + v * v) - rad; break;
                case 1: d = std::max(std::fabs(u), std::fabs(v)) - rad * 0.78; break;
                case 2: {
                    double rr = std::sqrt(u * u + v * v);
                    double phi = std::atan2(v, u);
                    d = rr - detail::polygon_radius(phi, 3, rad);
                    break;
                }
                case 3: {
                    double rr = std::sqrt(u * u + v * v);
                    double phi = std::atan2(v, u);
                    d = rr - detail::star_radius(phi, rad);
                    break;
                }
            }
            double alpha = std::clamp(0.5 - d, 0.0, 1.0);
            img[(0 * static_cast<size_t>(N) + y) * N + x] = px.r * (1 - alpha) + fc.r * alpha;
            img[(1 * static_cast<size_t>(N) + y) * N + x] = px.g * (1 - alpha) + fc.g * alpha;
            img[(2 * static_cast<size_t>(N) + y) * N + x] = px.b * (1 - alpha) + fc.b * alpha;
        }
    }
    return img;
}

inline std::vector<int> corpus_prompt(const AttrTuple& a) {
    // "a photo of a <color> <shape> on <texture>"
    return {1, 2, 3, 1, kColorBase + a[1], kShapeBase + a[0], 5, kTextureBase + a[2]};
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

struct Corpus {
    ToySpec spec;
    uint64_t seed = 0;
    std::vector<Tensor> images;  // [0,1], (3,canvas,canvas)
    std::vector<std::vector<int>> prompts;
    std::vector<AttrTuple> attrs;

    size_t size() const { return images.size(); }
};

inline Corpus generate_corpus(const ToySpec& spec, int size, uint64_t seed) {
    check(size >= 0, "generate_corpus: negative size");
    check(spec.canvas >= 8 && spec.canvas % 8 == 0,
          "generate_corpus: canvas must be a multiple of 8");
    Corpus c;
    c.spec = spec;
    c.seed = seed;
    auto allowed = spec.allowed_tuples();
    check(!allowed.empty(), "generate_corpus: no allowed attribute tuples");
    for (int i = 0; i < size; i++) {
        Rng rng = derive_rng(seed, "corpus_item", static_cast<uint64_t>(i));
        AttrTuple a = allowed[rng.uniform_int(0, static_cast<int64_t>(allowed.size()) - 1)];
        c.images.push_back(render_toy(spec, a[0], a[1], a[2], rng));
        c.prompts.push_back(corpus_prompt(a));
        c.attrs.push_back(a);
    }
    return c;
}

inline void save_corpus(const Corpus& c, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream pj(fs::path(dir) / "prompts.jsonl");
    for (size_t i = 0; i < c.size(); i++) {
        char name[32];
        std::snprintf(name, sizeof(name), "%06zu.png", i);
        save_image_png((fs::path(dir) / "images" / name).string(), c.images[i]);
        ordered_json line{{"index", i},
                          {"image", std::string("images/") + name},
                          {"tokens", c.prompts[i]},
                          {"text", detokenize(c.prompts[i])},
                          {"attrs", c.attrs[i]}};
        pj << line.dump() << "\n";
    }
    ordered_json sj{{"schema_version", 1},
                    {"kind", "toy-corpus"},
                    {"size", c.size()},
                    {"seed", c.seed},
                    {"spec", c.spec}};
    std::ofstream(fs::path(dir) / "spec.json") << sj.dump(2) << "\n";
}

inline Corpus load_corpus(const std::string& dir) {
    std::ifstream sf(fs::path(dir) / "spec.json");
    check(sf.good(), "load_corpus: missing spec.json in " + dir);
    json sj = json::parse(sf);
    Corpus c;
    c.spec = sj.at("spec").get<ToySpec>();
    c.seed = sj.at("seed").get<uint64_t>();
    std::ifstream pj(fs::path(dir) / "prompts.jsonl");
    std::string line;
    while (std::getline(pj, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        c.images.push_back(
            load_image_png((fs::path(dir) / rec.at("image").get<std::string>()).string()));
        c.prompts.push_back(rec.at("tokens").get<std::vector<int>>());
        auto a = rec.at("attrs");
        c.attrs.push_back({a[0].get<int>(), a[1].get<int>(), a[2].get<int>()});
    }
    check(c.images.size() == sj.at("size").get<size_t>(),
          "load_corpus: size mismatch vs spec.json");
    return c;
}

// ---------------------------------------------------------------------------
// concepts
// ---------------------------------------------------------------------------

// ~20 prompt templates, each with the concept slot exactly once.
inline std::vector<std::vector<int>> concept_templates() {
    const int C = kConceptTokenId;
    return {
        {1, 2, 3, C},            // a photo of <c>
        {1, 10, 2, 3, C},        // a bright photo of <c>
        {1, 11, 2, 3, C},        // a dark photo of <c>
        {4, C, 12},              // the <c> centered
        {4, C, 13},              // the <c> shifted
        {1, 8, C},               // a large <c>
        {1, 7, C},               // a small <c>
        {1, 9, C},               // a rotated <c>
        {1, 2, 3, 4, C},         // a photo of the <c>
        {4, C, 15},              // the <c> image
        {1, C, 14},              // a <c> scene
        {1, 2, 3, 1, 7, C},      // a photo of a small <c>
        {1, 2, 3, 1, 8, C},      // a photo of a large <c>
        {4, 10, C},              // the bright <c>
        {4, 11, C},              // the dark <c>
        {1, 9, 2, 3, C},         // a rotated photo of <c>
        {4, C, 5, 6},            // the <c> on background
        {1, 2, 3, C, 12},        // a photo of <c> centered
        {1, 2, 3, C, 13},        // a photo of <c> shifted
        {1, 15, 3, C},           // a image of <c>
    };
}

struct ConceptSet {
    std::string concept_id;
    AttrTuple attribute{0, 0, 0};
    uint64_t seed = 0;
    std::vector<Tensor> references;  // [0,1]
    std::vector<std::vector<int>> templates;
};

inline std::string concept_name(const AttrTuple& a) {
    return token_text(kShapeBase + a[0]) + "-" + token_text(kColorBase + a[1]) + "-" +
           token_text(kTextureBase + a[2]);
}

inline ConceptSet make_concept(const ToySpec& corpus_spec, const AttrTuple& attribute,
                               uint64_t seed, int n_refs) {
    check(n_refs >= 3 && n_refs <= 5, "make_concept: n_refs must be within [3,5]");
    check(corpus_spec.is_held_out(attribute),
          "make_concept: attribute tuple " + concept_name(attribute) +
              " collides with the pretraining corpus (not held out)");
    ConceptSet cs;
    cs.attribute = attribute;
    cs.concept_id = concept_name(attribute);
    cs.seed = seed;
    cs.templates = concept_templates();
    for (int i = 0; i < n_refs; i++) {
        Rng rng = derive_rng(seed, "concept_ref", static_cast<uint64_t>(i));
        cs.references.push_back(
            render_toy(corpus_spec, attribute[0], attribute[1], attribute[2], rng));
    }
    return cs;
}

inline void save_concept(const ConceptSet& cs, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "refs");
    for (size_t i = 0; i < cs.references.size(); i++) {
        char name[32];
        std::snprintf(name, sizeof(name), "%02zu.png", i);
        save_image_png((fs::path(dir) / "refs" / name).string(), cs.references[i]);
    }
    ordered_json tj = json::array();
    for (const auto& t : cs.templates)
        tj.push_back(ordered_json{{"tokens", t}, {"text", detokenize(t)}});
    ordered_json j{{"schema_version", 1},
                   {"concept_id", cs.concept_id},
                   {"attribute", cs.attribute},
                   {"seed", cs.seed},
                   {"n_refs", cs.references.size()},
                   {"templates", tj}};
    std::ofstream(fs::path(dir) / "concept.json") << j.dump(2) << "\n";
}

inline ConceptSet load_concept(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "concept.json");
    check(f.good(), "load_concept: missing concept.json in " + dir);
    json j = json::parse(f);
    ConceptSet cs;
    cs.concept_id = j.at("concept_id").get<std::string>();
    auto a = j.at("attribute");
    cs.attribute = {a[0].get<int>(), a[1].get<int>(), a[2].get<int>()};
    cs.seed = j.at("seed").get<uint64_t>();
    for (const auto& t : j.at("templates"))
        cs.templates.push_back(t.at("tokens").get<std::vector<int>>());
    size_t n = j.at("n_refs").get<size_t>();
    for (size_t i = 0; i < n; i++) {
        char name[32];
        std::snprintf(name, sizeof(name), "%02zu.png", i);
        cs.references.push_back(
            load_image_png((fs::path(dir) / "refs" / name).string()));
    }
    return cs;
}

// stack [0,1] images into a model-space (B,3,H,W) batch
inline Tensor stack_to_model(const std::vector<Tensor>& imgs01,
                             const std::vector<int>& idx) {
    check(!idx.empty(), "stack_to_model: empty index list");
    int H = imgs01[0].dim(1), W = imgs01[0].dim(2);
    Tensor out({static_cast<int>(idx.size()), 3, H, W});
    for (size_t b = 0; b < idx.size(); b++) {
        const Tensor& im = imgs01[static_cast<size_t>(idx[b])];
        for (size_t k = 0; k < im.size(); k++)
            out[b * im.size() + k] = im[k] * 2.0 - 1.0;
    }
    return out;
}

}  // namespace echolab
