// echolab: toy-scale bidirectional concept-distillation lab.
// Subcommands: gen-data, train, sample, eval.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "echolab/config.hpp"

using namespace echolab;

namespace {

// exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 divergence
constexpr int kOk = 0, kConfigError = 2, kPrereqError = 3, kDivergence = 4;

void write_error_json(const std::string& dir, const std::string& kind,
                      const std::string& message) {
    if (dir.empty()) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) return;
    ordered_json j{{"error", kind}, {"message", message}};
    std::ofstream(fs::path(dir) / "error.json") << j.dump(2) << "\n";
}

struct RunLock {
    std::string path;
    bool held = false;
    explicit RunLock(const std::string& dir) : path((fs::path(dir) / ".lock").string()) {
        std::ifstream probe(path);
        if (probe.good())
            throw ParamError("run directory is locked by another run: " + dir);
        std::ofstream f(path);
        f << "locked\n";
        held = true;
    }
    ~RunLock() {
        if (held) {
            std::error_code ec;
            fs::remove(path, ec);
        }
    }
};

AttrTuple parse_attr_words(const std::string& s) {
    auto p1 = s.find(':');
    auto p2 = s.find(':', p1 == std::string::npos ? p1 : p1 + 1);
    check(p1 != std::string::npos && p2 != std::string::npos,
          "--concept expects shape:color:texture");
    std::string sh = s.substr(0, p1), co = s.substr(p1 + 1, p2 - p1 - 1),
                tx = s.substr(p2 + 1);
    auto find_in = [&](const std::string& w, int base, int count) {
        for (int i = 0; i < count; i++)
            if (vocab()[static_cast<size_t>(base + i)] == w) return i;
        throw ParamError("unknown attribute word: " + w);
    };
    return {find_in(sh, kShapeBase, kNumShapes), find_in(co, kColorBase, kNumColors),
            find_in(tx, kTextureBase, kNumTextures)};
}

std::vector<std::vector<int>> templates_from_manifest(const ordered_json& manifest) {
    std::vector<std::vector<int>> out;
    if (!manifest.contains("concept")) return out;
    for (const auto& t : manifest.at("concept").at("templates"))
        out.push_back(t.at("tokens").get<std::vector<int>>());
    return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int size, uint64_t seed,
                 const std::string& concept_words, int concept_index, int n_refs,
                 const std::string& corpus_dir) {
    ToySpec spec;
    if (!corpus_dir.empty()) {
        std::ifstream sf(fs::path(corpus_dir) / "spec.json");
        if (!sf.good()) throw PrereqError("gen-data: no spec.json under " + corpus_dir);
        spec = json::parse(sf).at("spec").get<ToySpec>();
    }
    bool concept_mode = !concept_words.empty() || concept_index >= 0;
    if (concept_mode) {
        AttrTuple attr;
        if (!concept_words.empty()) {
            attr = parse_attr_words(concept_words);
        } else {
            check(concept_index < static_cast<int>(spec.held_out.size()),
                  "--concept-index out of range");
            attr = spec.held_out[static_cast<size_t>(concept_index)];
        }
        ConceptSet cs = make_concept(spec, attr, seed, n_refs);
        save_concept(cs, out);
        std::cout << "concept " << cs.concept_id << " with " << cs.references.size()
                  << " references -> " << out << "\n";
    } else {
        Corpus corpus = generate_corpus(spec, size, seed);
        save_corpus(corpus, out);
        std::cout << "corpus of " << corpus.size() << " images -> " << out << "\n";
    }
    return kOk;
}

int cmd_train(const std::string& stage, const std::string& config_path,
              const std::string& corpus_dir, const std::string& concept_dir,
              const std::string& ckpt_dir, const std::string& out_root,
              std::string run_id, int iterations, int64_t seed, double lr,
              int batch_size, const std::vector<std::string>& ablate) {
    RunConfig rc = load_run_config(config_path);
    check(rc.stages.count(stage), "unknown stage: " + stage);
    TrainConfig cfg = rc.stages[stage];
    if (iterations >= 0) cfg.iterations = iterations;
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    if (lr > 0) cfg.learning_rate = lr;
    if (batch_size > 0) cfg.batch_size = batch_size;
    for (const auto& a : ablate) {
        if (a == "no_teacher") cfg.no_teacher = true;
        else if (a == "no_critics") cfg.no_critics = true;
        else throw ParamError("unknown --ablate value: " + a);
    }

    if (run_id.empty()) run_id = stage + "-s" + std::to_string(cfg.seed);
    std::string run_dir = (fs::path(out_root) / run_id).string();
    fs::create_directories(run_dir);
    RunLock lock(run_dir);
    std::ofstream(fs::path(run_dir) / "resolved_config.json")
        << resolved_config_json(rc, stage, cfg).dump(2) << "\n";

    std::ofstream history(fs::path(run_dir) / "history.jsonl");
    HistorySink sink = [&](const IterRecord& r) {
        ordered_json j{{"iter", r.iter},
                       {"t", r.t},
                       {"c_t", r.c_t},
                       {"loss_rec", r.loss_rec},
                       {"loss_align", r.loss_align},
                       {"loss_gan_g", r.loss_gan_g},
                       {"loss_gan_d", r.loss_gan_d},
                       {"clamp_events", r.clamp_events},
                       {"degenerate_norms", r.degenerate_norms},
                       {"wall_ms", r.wall_ms}};
        history << j.dump() << "\n";
    };

    ordered_json extra;
    extra["stage"] = stage;
    extra["seed"] = cfg.seed;
    ordered_json cfg_j;
    to_json(cfg_j, cfg);
    extra["train_config"] = cfg_j;
    extra["ablate"] =
        ordered_json{{"no_teacher", cfg.no_teacher}, {"no_critics", cfg.no_critics}};

    Workspace ws;
    std::string ckpt_out = (fs::path(run_dir) / "checkpoint").string();

    auto finish = [&](const StageResult& res) {
        save_checkpoint(ckpt_out, ws.bundle, ws.ensemble, ws.probe, extra);
        std::cout << stage << ": " << res.history.size() << " iterations in "
                  << std::fixed << std::setprecision(1) << res.wall_seconds
                  << "s; checkpoint -> " << ckpt_out << "\n";
        return kOk;
    };

    try {
        if (stage == "pretrain") {
            check(!corpus_dir.empty(), "pretrain requires --corpus");
            Corpus corpus = load_corpus(corpus_dir);
            ws = Workspace(rc.arch,
                           make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end),
                           cfg.seed);
            extra["lineage"] = ordered_json::array({"pretrain"});
            StageResult res = pretrain_teacher(ws, corpus, cfg, sink);
            return finish(res);
        }
        if (ckpt_dir.empty()) throw PrereqError(stage + " requires --ckpt");
        Checkpoint ck = load_checkpoint(ckpt_dir);
        std::string parent_stage = ck.manifest.value("stage", std::string("?"));
        ordered_json lineage = ck.manifest.value("lineage", ordered_json::array());
        lineage.push_back(stage);
        extra["lineage"] = lineage;

        if (stage == "distill-base") {
            if (parent_stage != "pretrain")
                throw PrereqError("distill-base requires a pretrain checkpoint, got " +
                                  parent_stage);
            check(!corpus_dir.empty(), "distill-base requires --corpus");
            Corpus corpus = load_corpus(corpus_dir);
            ws = Workspace::from_checkpoint(std::move(ck));
            StageResult res = distill_base_student(ws, corpus, cfg, sink);
            return finish(res);
        }
        if (stage == "personalize") {
            if (parent_stage != "distill-base")
                throw PrereqError("personalize requires a distill-base checkpoint, got " +
                                  parent_stage);
            check(!concept_dir.empty(), "personalize requires --concept");
            ConceptSet concept_set = load_concept(concept_dir);
            ordered_json tj = ordered_json::array();
            for (const auto& t : concept_set.templates)
                tj.push_back(ordered_json{{"tokens", t}, {"text", detokenize(t)}});
            extra["concept"] = ordered_json{{"concept_id", concept_set.concept_id},
                                            {"attribute", concept_set.attribute},
                                            {"n_refs", concept_set.references.size()},
                                            {"templates", tj}};
            ws = Workspace::from_checkpoint(std::move(ck));
            StageResult res = run_distillation_stage(ws, concept_set, cfg, sink);
            return finish(res);
        }
        if (stage == "echo") {
            if (parent_stage != "personalize")
                throw PrereqError("echo requires a personalize checkpoint, got " +
                                  parent_stage);
            auto templates = templates_from_manifest(ck.manifest);
            if (templates.empty())
                throw PrereqError("echo: input checkpoint has no concept metadata");
            extra["concept"] = ck.manifest.at("concept");
            ws = Workspace::from_checkpoint(std::move(ck));
            StageResult res = run_echo_stage(ws, templates, cfg, sink);
            return finish(res);
        }
        throw ParamError("unknown stage: " + stage);
    } catch (const DivergenceError&) {
        // retain the partial state for post-mortem, then rethrow for exit code
        std::string partial = (fs::path(run_dir) / "checkpoint-partial").string();
        if (ws.bundle.teacher.params.count() > 0)
            save_checkpoint(partial, ws.bundle, ws.ensemble, ws.probe, extra);
        throw;
    }
}

int cmd_sample(const std::string& ckpt_dir, const std::string& model, int nfe,
               int prompt_id, const std::string& prompt_words, uint64_t seed, int n,
               const std::string& out) {
    Checkpoint ck = load_checkpoint(ckpt_dir);
    std::vector<std::vector<int>> templates = templates_from_manifest(ck.manifest);

    std::vector<int> prompt;
    if (!prompt_words.empty()) {
        std::istringstream is(prompt_words);
        std::string w;
        while (is >> w) {
            if (w == "<concept>") {
                prompt.push_back(kConceptTokenId);
                continue;
            }
            bool found = false;
            for (size_t i = 0; i < vocab().size(); i++)
                if (vocab()[i] == w) {
                    prompt.push_back(static_cast<int>(i));
                    found = true;
                    break;
                }
            if (!found) throw ParamError("sample: unknown word '" + w + "'");
        }
    } else {
        if (templates.empty())
            throw PrereqError("sample: checkpoint has no concept templates; use --prompt");
        check(prompt_id >= 0 && prompt_id < static_cast<int>(templates.size()),
              "sample: --prompt-id out of range");
        prompt = templates[static_cast<size_t>(prompt_id)];
    }

    std::vector<std::vector<int>> prompts(static_cast<size_t>(n), prompt);
    NoGradGuard ng;
    Var cond = ck.bundle.encoder.encode(prompts);
    Tensor samples;
    if (model == "student") {
        samples = sample_few_step(ck.bundle.student, ck.bundle.schedule, cond, nfe, seed);
    } else if (model == "teacher") {
        samples = sample_teacher(ck.bundle.teacher, ck.bundle.schedule, cond, nfe, seed);
    } else {
        throw ParamError("sample: --model must be student or teacher");
    }

    fs::create_directories(out);
    std::vector<Tensor> imgs;
    int C = samples.dim(1), H = samples.dim(2), W = samples.dim(3);
    for (int i = 0; i < samples.dim(0); i++) {
        Tensor img({C, H, W});
        for (size_t k = 0; k < img.size(); k++) {
            double v = samples[static_cast<size_t>(i) * img.size() + k];
            img[k] = std::min(1.0, std::max(0.0, (v + 1.0) * 0.5));
        }
        imgs.push_back(img);
    }
    save_image_png((fs::path(out) / "grid.png").string(),
                   tile_grid(imgs, std::min(n, 8)));
    ordered_json side{{"checkpoint", ckpt_dir},
                      {"model", model},
                      {"nfe", nfe},
                      {"seed", seed},
                      {"n", n},
                      {"prompt_id", prompt_words.empty() ? prompt_id : -1},
                      {"prompt_tokens", prompt},
                      {"prompt_text", detokenize(prompt)}};
    std::ofstream(fs::path(out) / "sample.json") << side.dump(2) << "\n";
    std::cout << "wrote " << n << " samples -> " << out << "/grid.png\n";
    return kOk;
}

int cmd_eval(const std::vector<std::string>& ckpts,
             const std::vector<std::string>& concepts, std::vector<int> nfes,
             const std::string& out, const std::string& config_path) {
    RunConfig rc = load_run_config(config_path);
    if (nfes.empty()) nfes = rc.eval_nfes;
    for (int nfe : nfes)
        check(nfe == 1 || nfe == 2 || nfe == 4, "eval: student nfe must be 1, 2 or 4");
    check(!ckpts.empty(), "eval: need at least one --ckpts entry");
    check(!concepts.empty(), "eval: need at least one --concepts entry");
    RunReport rep = make_report(ckpts, concepts, nfes, out, rc.eval);
    std::cout << "report with " << rep.cells.size() << " cells -> " << out
              << "/report.json\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"echolab: joint teacher/student concept distillation on toy data"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the toy corpus or a concept");
    std::string g_out;
    int g_size = 2000;
    uint64_t g_seed = 0;
    std::string g_concept;
    int g_concept_index = -1;
    int g_n_refs = 4;
    std::string g_corpus;
    gen->add_option("--out", g_out, "output directory")->required();
    gen->add_option("--size", g_size, "corpus size");
    gen->add_option("--seed", g_seed, "generation seed");
    gen->add_option("--concept", g_concept, "held-out tuple as shape:color:texture");
    gen->add_option("--concept-index", g_concept_index,
                    "index into the spec's held-out list");
    gen->add_option("--n-refs", g_n_refs, "reference count for a concept (3-5)");
    gen->add_option("--corpus", g_corpus, "corpus dir whose spec to validate against");

    // train
    auto* tr = app.add_subcommand("train", "run a training stage");
    std::string t_stage, t_config, t_corpus, t_concept, t_ckpt, t_out = "runs", t_run_id;
    int t_iterations = -1, t_batch = -1;
    int64_t t_seed = -1;
    double t_lr = -1;
    std::vector<std::string> t_ablate;
    tr->add_option("--stage", t_stage, "pretrain|distill-base|personalize|echo")
        ->required();
    tr->add_option("--config", t_config, "JSON config file");
    tr->add_option("--corpus", t_corpus, "corpus directory");
    tr->add_option("--concept", t_concept, "concept directory");
    tr->add_option("--ckpt", t_ckpt, "input checkpoint directory");
    tr->add_option("--out", t_out, "output root");
    tr->add_option("--run-id", t_run_id, "run directory name");
    tr->add_option("--iterations", t_iterations, "iteration override");
    tr->add_option("--seed", t_seed, "seed override");
    tr->add_option("--lr", t_lr, "learning-rate override");
    tr->add_option("--batch-size", t_batch, "batch-size override");
    tr->add_option("--ablate", t_ablate, "no_teacher and/or no_critics");

    // sample
    auto* sm = app.add_subcommand("sample", "generate images from a checkpoint");
    std::string s_ckpt, s_model = "student", s_prompt, s_out = "samples";
    int s_nfe = 1, s_prompt_id = 0, s_n = 16;
    uint64_t s_seed = 0;
    sm->add_option("--ckpt", s_ckpt, "checkpoint directory")->required();
    sm->add_option("--model", s_model, "student|teacher");
    sm->add_option("--nfe", s_nfe, "1|2|4 for student, steps for teacher");
    sm->add_option("--prompt-id", s_prompt_id, "concept template index");
    sm->add_option("--prompt", s_prompt, "literal prompt words");
    sm->add_option("--seed", s_seed, "sampling seed");
    sm->add_option("--n", s_n, "number of samples");
    sm->add_option("--out", s_out, "output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate checkpoints into a report");
    std::vector<std::string> e_ckpts, e_concepts;
    std::vector<int> e_nfes;
    std::string e_out = "report", e_config;
    ev->add_option("--ckpts", e_ckpts, "checkpoint directories")->required();
    ev->add_option("--concepts", e_concepts, "concept directories")->required();
    ev->add_option("--nfes", e_nfes, "student NFE list (default 1 2 4)");
    ev->add_option("--out", e_out, "report directory");
    ev->add_option("--config", e_config, "JSON config file");

    std::string err_dir;
    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            return app.exit(e) ? kConfigError : kOk;
        }
        if (gen->parsed()) {
            err_dir = g_out;
            return cmd_gen_data(g_out, g_size, g_seed, g_concept, g_concept_index,
                                g_n_refs, g_corpus);
        }
        if (tr->parsed()) {
            err_dir = (fs::path(t_out) /
                       (t_run_id.empty() ? t_stage : t_run_id)).string();
            return cmd_train(t_stage, t_config, t_corpus, t_concept, t_ckpt, t_out,
                             t_run_id, t_iterations, t_seed, t_lr, t_batch, t_ablate);
        }
        if (sm->parsed()) {
            err_dir = s_out;
            return cmd_sample(s_ckpt, s_model, s_nfe, s_prompt_id, s_prompt, s_seed,
                              s_n, s_out);
        }
        if (ev->parsed()) {
            err_dir = e_out;
            return cmd_eval(e_ckpts, e_concepts, e_nfes, e_out, e_config);
        }
        return kConfigError;
    } catch (const ParamError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        write_error_json(err_dir, "config", e.what());
        return kConfigError;
    } catch (const PrereqError& e) {
        std::cerr << "prerequisite error: " << e.what() << "\n";
        write_error_json(err_dir, "prerequisite", e.what());
        return kPrereqError;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        write_error_json(err_dir, "divergence", e.what());
        return kDivergence;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        write_error_json(err_dir, "integrity", e.what());
        return kPrereqError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        write_error_json(err_dir, "internal", e.what());
        return 1;
    }
}
