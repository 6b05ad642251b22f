#pragma once

#include <map>
#include <set>
#include <string>

#include "echolab/engine.hpp"
#include "echolab/evalkit.hpp"

namespace echolab {

// Run configuration: defaults < config file < CLI flags. The fully resolved
// config is serialized into the run directory before any work starts.
struct RunConfig {
    ArchConfig arch;
    int schedule_T = 1000;       // DDPM linear defaults; toy configs override
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::map<std::string, TrainConfig> stages;
    EvalOptions eval;
    std::vector<int> eval_nfes = {1, 2, 4};

    RunConfig() {
        TrainConfig pre;
        pre.stage = Stage::kPretrain;
        pre.iterations = 3000;
        pre.batch_size = 16;
        pre.learning_rate = 1e-3;
        pre.seed = 1;
        TrainConfig base;
        base.stage = Stage::kDistillBase;
        base.iterations = 1200;
        base.batch_size = 8;
        base.learning_rate = 5e-4;
        base.seed = 2;
        TrainConfig pers;
        pers.stage = Stage::kPersonalize;
        pers.iterations = 1000;  // paper-tier iteration count
        pers.batch_size = 2;
        pers.learning_rate = 2e-5;
        pers.seed = 3;
        TrainConfig echo = pers;
        echo.stage = Stage::kEcho;
        echo.iterations = 500;
        echo.seed = 4;
        stages["pretrain"] = pre;
        stages["distill-base"] = base;
        stages["personalize"] = pers;
        stages["echo"] = echo;
    }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ParamError("config: unknown key '" + it.key() + "' in " + where);
}

inline void apply_stage_json(TrainConfig& c, const json& j, const std::string& where) {
    reject_unknown(j,
                   {"iterations", "batch_size", "learning_rate", "seed", "lambda_id",
                    "lambda_mse", "lambda_ms", "lambda_k", "swd_scales",
                    "swd_projections", "aux_iterations", "aux_batch_size",
                    "aux_learning_rate", "target_loss", "swd_threshold"},
                   where);
    if (j.contains("iterations")) c.iterations = j["iterations"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("lambda_id")) c.weights.lambda_id = j["lambda_id"].get<double>();
    if (j.contains("lambda_mse")) c.weights.lambda_mse = j["lambda_mse"].get<double>();
    if (j.contains("lambda_ms")) c.weights.lambda_ms = j["lambda_ms"].get<double>();
    if (j.contains("lambda_k"))
        c.weights.lambda_k = j["lambda_k"].get<std::vector<double>>();
    if (j.contains("swd_scales")) c.swd_scales = j["swd_scales"].get<int>();
    if (j.contains("swd_projections"))
        c.swd_projections = j["swd_projections"].get<int>();
    if (j.contains("aux_iterations")) c.aux_iterations = j["aux_iterations"].get<int>();
    if (j.contains("aux_batch_size")) c.aux_batch_size = j["aux_batch_size"].get<int>();
    if (j.contains("aux_learning_rate"))
        c.aux_learning_rate = j["aux_learning_rate"].get<double>();
    if (j.contains("target_loss"))
        c.pretrain_target_loss = j["target_loss"].get<double>();
    if (j.contains("swd_threshold"))
        c.base_swd_threshold = j["swd_threshold"].get<double>();
}

}  // namespace detail

inline RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (path.empty()) return rc;
    std::ifstream f(path);
    if (!f.good()) throw ParamError("config: cannot open " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const std::exception& e) {
        throw ParamError(std::string("config: parse error: ") + e.what());
    }
    detail::reject_unknown(j, {"arch", "schedule", "stages", "eval"}, "config root");
    if (j.contains("arch")) {
        const json& a = j["arch"];
        detail::reject_unknown(a,
                               {"img_channels", "img_size", "ch1", "ch2", "ch3",
                                "cond_dim", "ctx_tokens", "temb_dim", "vocab_size",
                                "max_prompt_len", "token_embed_dim", "embedder_widths"},
                               "arch");
        json merged;
        to_json(merged, rc.arch);
        for (auto it = a.begin(); it != a.end(); ++it) merged[it.key()] = it.value();
        from_json(merged, rc.arch);
    }
    if (j.contains("schedule")) {
        const json& s = j["schedule"];
        detail::reject_unknown(s, {"T", "beta_start", "beta_end"}, "schedule");
        if (s.contains("T")) rc.schedule_T = s["T"].get<int>();
        if (s.contains("beta_start")) rc.beta_start = s["beta_start"].get<double>();
        if (s.contains("beta_end")) rc.beta_end = s["beta_end"].get<double>();
    }
    if (j.contains("stages")) {
        detail::reject_unknown(j["stages"],
                               {"pretrain", "distill-base", "personalize", "echo"},
                               "stages");
        for (auto it = j["stages"].begin(); it != j["stages"].end(); ++it)
            detail::apply_stage_json(rc.stages[it.key()], it.value(),
                                     "stages." + it.key());
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        detail::reject_unknown(e, {"samples_per_cell", "teacher_steps", "seed", "nfes"},
                               "eval");
        if (e.contains("samples_per_cell"))
            rc.eval.samples_per_cell = e["samples_per_cell"].get<int>();
        if (e.contains("teacher_steps"))
            rc.eval.teacher_steps = e["teacher_steps"].get<int>();
        if (e.contains("seed")) rc.eval.eval_seed = e["seed"].get<uint64_t>();
        if (e.contains("nfes")) rc.eval_nfes = e["nfes"].get<std::vector<int>>();
    }
    // schedule spec rides along in every stage config
    for (auto& [name, sc] : rc.stages) {
        sc.schedule_T = rc.schedule_T;
        sc.beta_start = rc.beta_start;
        sc.beta_end = rc.beta_end;
    }
    return rc;
}

inline ordered_json resolved_config_json(const RunConfig& rc, const std::string& stage,
                                         const TrainConfig& active) {
    ordered_json aj;
    to_json(aj, rc.arch);
    ordered_json sj;
    to_json(sj, active);
    return ordered_json{{"arch", aj},
                        {"schedule", ordered_json{{"T", rc.schedule_T},
                                                  {"beta_start", rc.beta_start},
                                                  {"beta_end", rc.beta_end},
                                                  {"kind", "linear"}}},
                        {"stage", stage},
                        {"train_config", sj}};
}

}  // namespace echolab
