// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dcmoe/checkpoint.hpp"
#include "dcmoe/data.hpp"
#include "dcmoe/fusion.hpp"
#include "dcmoe/model.hpp"

namespace dcmoe {

enum class TrainMask { All, GateAndShared };

bool param_trainable(const std::string& name, TrainMask mask);

struct StageConfig {
    std::string stage;  // specialist | warmup | joint | dense-baseline
    TrainMask mask = TrainMask::All;
    std::size_t steps = 50;
    std::size_t batch_size = 4;
    double lr = 1e-4;
    double lr_end_frac = 0.1;  // cosine decays to lr * lr_end_frac
    double weight_decay = 0.01;
    double aux_w_start = 1e-2;
    double aux_w_end = 1e-3;
    std::uint64_t seed = 1;

    nlohmann::json to_json() const;
    static StageConfig from_json(const nlohmann::json& j);
};

struct TraceRow {
    std::size_t step = 0;
    std::string stage;
    double total = 0, primary = 0, aux = 0, aux_weight = 0, lr = 0;
    /// channel-mean CE per domain for the sequences of this step's batch;
    /// NaN when the batch contained no sequence of that domain
    std::vector<double> domain_loss;
};

using LossTrace = std::vector<TraceRow>;

std::string trace_csv(const LossTrace& trace, const std::vector<std::string>& domain_names);
LossTrace trace_from_csv(const std::string& text, std::size_t n_domains);

class divergence_error : public std::runtime_error {
  public:
    divergence_error(std::string msg, LossTrace trace)
        : std::runtime_error(std::move(msg)), trace(std::move(trace)) {}
    LossTrace trace;
};

/// Draws one batch for a training step (step index given for reproducibility).
using BatchSampler = std::function<Batch(std::size_t step, Rng& rng)>;

/// AdamW with cosine LR decay and linear aux-weight annealing. Only
/// parameters selected by cfg.mask are updated; all others stay bit-identical.
LossTrace train_stage(ModelConfig& model_cfg, ParamStore& params, const StageConfig& cfg,
                      const BatchSampler& sampler, std::size_t n_domains,
                      RoutingTelemetry* tel = nullptr);

double aux_weight_at(const StageConfig& cfg, std::size_t step);

/// Sampler over one or more datasets; sequences are drawn uniformly over the
/// concatenation, so pool sizes set the mixing proportions.
BatchSampler pooled_sampler(std::vector<const Dataset*> pools, std::size_t batch_size);

/// Per-domain channel-mean CE on held-out data.
std::vector<double> eval_per_domain(const ModelConfig& cfg, const ParamStore& params,
                                    const std::vector<Dataset>& eval_sets,
                                    std::size_t batch_size = 8, RoutingTelemetry* tel = nullptr);

struct CurriculumArtifacts {
    std::vector<std::string> specialist_paths;
    std::string fused_path, warmup_path, joint_path;
    std::vector<std::string> trace_paths;
};

/// specialists x4 -> fuse -> warmup -> joint; every checkpoint and trace is
/// persisted under out_dir.
CurriculumArtifacts run_curriculum(const DatasetManifest& manifest, const DataBundle& bundle,
                                   const ModelConfig& dense_cfg, const StageConfig& specialist,
                                   const StageConfig& warmup, const StageConfig& joint,
                                   const MoeConfig& moe, const std::string& out_dir);

/// Naive joint training of one dense model on the imbalanced raw pools.
Checkpoint train_dense_baseline(const DatasetManifest& manifest, const DataBundle& bundle,
                                const ModelConfig& dense_cfg, const StageConfig& cfg,
                                const std::string& out_dir);

}  // namespace dcmoe
