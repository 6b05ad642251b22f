#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "echolab/checkpoint.hpp"
#include "echolab/losses.hpp"
#include "echolab/sampler.hpp"

namespace echolab {

// Proxy metrics standing in for CLIP-T / CLIP-I / DINO. Reported values are
// only compared against each other (orderings, deltas), never against any
// external score scale.

constexpr uint64_t kDefaultEvalSeed = 0x45564c;

// mean cosine between the probe's image embeddings and the matching prompt
// embeddings; in [-1, 1]
inline double proxy_prompt_alignment(const Tensor& images_model,
                                     const std::vector<std::vector<int>>& prompts,
                                     const AlignmentProbe& probe) {
    check(images_model.dim(0) == static_cast<int>(prompts.size()),
          "proxy_prompt_alignment: batch mismatch");
    NoGradGuard ng;
    Var ie = probe.embed_images(Var::constant(images_model));
    Var te = probe.embed_prompts(prompts);
    Var cos = ops::sum_last(ops::mul(ie, te));
    return ops::mean_all(cos).val().item();
}

// feature-space core: mean cosine over all (row of a, row of b) pairs
inline double mean_pairwise_cosine(const Var& fa, const Var& fb) {
    Var na = AlignmentProbe::normalize_rows(fa);
    Var nb = AlignmentProbe::normalize_rows(fb);
    int N = na.shape()[0], M = nb.shape()[0], D = na.shape()[1];
    Var sims = ops::bmm_nt(ops::reshape_v(na, {1, N, D}), ops::reshape_v(nb, {1, M, D}));
    return ops::mean_all(sims).val().item();
}

// mean pairwise cosine between identity features of generated and reference
// images; in [-1, 1], and 1 when every feature pair coincides
inline double proxy_image_similarity(const Tensor& images_model,
                                     const Tensor& refs_model,
                                     const IdentityEmbedder& embedder) {
    check(refs_model.dim(0) >= 1, "proxy_image_similarity: empty reference set");
    NoGradGuard ng;
    Var fg = identity_features(embedder, Var::constant(images_model));
    Var fr = identity_features(embedder, Var::constant(refs_model));
    return mean_pairwise_cosine(fg, fr);
}

// ms_swd with a fixed evaluation seed; zero iff the slice multisets coincide
inline double distribution_distance(const Tensor& samples01, const Tensor& refs01,
                                    uint64_t eval_seed = kDefaultEvalSeed) {
    NoGradGuard ng;
    SwdConfig cfg{3, 64, derive_seed(eval_seed, "dist")};
    return ms_swd(Var::constant(samples01), Var::constant(refs01), cfg).val().item();
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct EvalOptions {
    int samples_per_cell = 64;
    int sample_batch = 16;
    int teacher_steps = 25;
    bool include_teacher = true;
    uint64_t eval_seed = kDefaultEvalSeed;
};

struct ReportCell {
    std::string checkpoint;
    std::string concept_id;
    std::string model;  // "student" | "teacher"
    int nfe = 1;
    double prompt_alignment = 0.0;
    double image_similarity = 0.0;
    double distribution_distance = 0.0;
    std::string grid_file;
};

struct RunReport {
    ordered_json doc;
    std::vector<ReportCell> cells;
};

namespace detail {

inline Tensor to_unit_batch(const Tensor& model_batch) {
    Tensor out(model_batch.shape());
    for (size_t i = 0; i < out.size(); i++)
        out[i] = std::min(1.0, std::max(0.0, (model_batch[i] + 1.0) * 0.5));
    return out;
}

inline Tensor stack_all_model(const std::vector<Tensor>& imgs01) {
    std::vector<int> idx(imgs01.size());
    for (size_t i = 0; i < idx.size(); i++) idx[i] = static_cast<int>(i);
    return stack_to_model(imgs01, idx);
}

}  // namespace detail

// Evaluates one cell: draws samples_per_cell images from the given model at
// the given NFE, prompts cycling through the concept template bank.
template <class SamplerFn>
inline ReportCell eval_cell(const Checkpoint& ck, const std::string& ckpt_dir,
                            const ConceptSet& concept_set, const std::string& model,
                            int nfe, const EvalOptions& opts, SamplerFn sampler,
                            const std::string& grids_dir, int cell_index) {
    ReportCell cell;
    cell.checkpoint = ckpt_dir;
    cell.concept_id = concept_set.concept_id;
    cell.model = model;
    cell.nfe = nfe;

    std::vector<std::vector<int>> all_prompts;
    int done = 0, chunk_id = 0;
    Tensor all_samples;
    {
        std::vector<Tensor> chunks;
        while (done < opts.samples_per_cell) {
            int B = std::min(opts.sample_batch, opts.samples_per_cell - done);
            std::vector<std::vector<int>> prompts;
            for (int j = 0; j < B; j++)
                prompts.push_back(concept_set.templates[(done + j) % concept_set.templates.size()]);
            NoGradGuard ng;
            Var cond = ck.bundle.encoder.encode(prompts);
            uint64_t seed = derive_seed(
                derive_seed(opts.eval_seed, concept_set.concept_id),
                model + "_nfe" + std::to_string(nfe), static_cast<uint64_t>(chunk_id));
            Tensor batch = sampler(cond, seed);
            chunks.push_back(batch);
            for (auto& p : prompts) all_prompts.push_back(p);
            done += B;
            chunk_id++;
        }
        int total = 0;
        for (auto& c : chunks) total += c.dim(0);
        all_samples = Tensor({total, chunks[0].dim(1), chunks[0].dim(2), chunks[0].dim(3)});
        int at = 0;
        for (auto& c : chunks) {
            std::copy_n(c.data(), c.size(), all_samples.data() + at * c.size() / c.dim(0));
            at += c.dim(0);
        }
    }

    Tensor refs_model = detail::stack_all_model(concept_set.references);
    cell.prompt_alignment = proxy_prompt_alignment(all_samples, all_prompts, ck.probe);
    cell.image_similarity =
        proxy_image_similarity(all_samples, refs_model, ck.bundle.embedder);
    Tensor samples01 = detail::to_unit_batch(all_samples);
    Tensor refs01 = detail::to_unit_batch(refs_model);
    cell.distribution_distance = distribution_distance(samples01, refs01, opts.eval_seed);

    // sample grid
    {
        std::vector<Tensor> imgs;
        int n = all_samples.dim(0);
        int C = all_samples.dim(1), H = all_samples.dim(2), W = all_samples.dim(3);
        for (int i = 0; i < n; i++) {
            Tensor img({C, H, W});
            std::copy_n(samples01.data() + static_cast<size_t>(i) * C * H * W,
                        static_cast<size_t>(C) * H * W, img.data());
            imgs.push_back(img);
        }
        char name[64];
        std::snprintf(name, sizeof(name), "cell_%03d.png", cell_index);
        fs::create_directories(grids_dir);
        save_image_png((fs::path(grids_dir) / name).string(), tile_grid(imgs, 8));
        cell.grid_file = std::string("grids/") + name;
    }
    return cell;
}

// Full evaluation: every (checkpoint, concept, nfe) student cell plus one
// teacher row per (checkpoint, concept). Writes report.json, grids and a
// plain-text summary; byte-identical when re-run on the same inputs.
inline RunReport make_report(const std::vector<std::string>& ckpt_dirs,
                             const std::vector<std::string>& concept_dirs,
                             const std::vector<int>& nfes, const std::string& out_dir,
                             const EvalOptions& opts = EvalOptions{}) {
    RunReport report;
    fs::create_directories(out_dir);
    std::string grids_dir = (fs::path(out_dir) / "grids").string();
    int cell_index = 0;
    ordered_json cells = ordered_json::array();

    for (const auto& ckpt_dir : ckpt_dirs) {
        Checkpoint ck = load_checkpoint(ckpt_dir);
        uint64_t cfg_hash = manifest_hash(ck.manifest);
        for (const auto& cdir : concept_dirs) {
            ConceptSet concept_set = load_concept(cdir);
            for (int nfe : nfes) {
                ReportCell cell = eval_cell(
                    ck, ckpt_dir, concept_set, "student", nfe, opts,
                    [&](const Var& cond, uint64_t seed) {
                        return sample_few_step(ck.bundle.student, ck.bundle.schedule,
                                               cond, nfe, seed);
                    },
                    grids_dir, cell_index++);
                report.cells.push_back(cell);
            }
            if (opts.include_teacher) {
                ReportCell cell = eval_cell(
                    ck, ckpt_dir, concept_set, "teacher", opts.teacher_steps, opts,
                    [&](const Var& cond, uint64_t seed) {
                        return sample_teacher(ck.bundle.teacher, ck.bundle.schedule,
                                              cond, opts.teacher_steps, seed);
                    },
                    grids_dir, cell_index++);
                report.cells.push_back(cell);
            }
        }
        for (size_t i = cells.size(); i < report.cells.size(); i++) {
            const ReportCell& c = report.cells[i];
            cells.push_back(ordered_json{{"checkpoint", c.checkpoint},
                                         {"config_hash", hex64(cfg_hash)},
                                         {"concept", c.concept_id},
                                         {"model", c.model},
                                         {"nfe", c.nfe},
                                         {"metrics",
                                          ordered_json{{"prompt_alignment", c.prompt_alignment},
                                                       {"image_similarity", c.image_similarity},
                                                       {"distribution_distance",
                                                        c.distribution_distance}}},
                                         {"samples", opts.samples_per_cell},
                                         {"grid", c.grid_file}});
        }
    }

    report.doc = ordered_json{
        {"schema_version", 1},
        {"kind", "echolab-report"},
        {"eval_seed", opts.eval_seed},
        {"note", "prompt_alignment / image_similarity / distribution_distance are "
                 "toy-scale proxy metrics; compare rows of this report against each "
                 "other only"},
        {"cells", cells}};
    std::ofstream(fs::path(out_dir) / "report.json") << report.doc.dump(2) << "\n";

    // plain-text summary: model / NFEs / metrics per row
    std::ostringstream tab;
    tab << std::left << std::setw(28) << "checkpoint" << std::setw(22) << "concept"
        << std::setw(9) << "model" << std::setw(5) << "nfe" << std::right
        << std::setw(12) << "align" << std::setw(12) << "imgsim" << std::setw(12)
        << "distdist" << "\n";
    for (const auto& c : report.cells) {
        std::string ck_short = fs::path(c.checkpoint).filename().string();
        tab << std::left << std::setw(28) << ck_short.substr(0, 27) << std::setw(22)
            << c.concept_id << std::setw(9) << c.model << std::setw(5) << c.nfe
            << std::right << std::fixed << std::setprecision(4) << std::setw(12)
            << c.prompt_alignment << std::setw(12) << c.image_similarity
            << std::setw(12) << c.distribution_distance << "\n";
    }
    std::ofstream(fs::path(out_dir) / "summary.txt") << tab.str();
    return report;
}

}  // namespace echolab
