#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lesa/dataset.hpp"
#include "lesa/model.hpp"

namespace lesa {

struct OptimConfig {
    double lr_init = 0.05;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 1e-4;  // conv/fc weights only; BN params and position embeddings exempt
    int warmup_epochs = 5;
    int total_epochs = 20;
    int batch_size = 128;
    bool hflip = false;
    bool per_step_schedule = false;

    void validate() const;
};

// Linear warmup from 0 to lr_init over warmup_epochs, then cosine annealing
// to 0 at total_epochs. t is epoch progress in [0, total].
double lr_schedule(const OptimConfig& cfg, double t);

class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Param> params, const OptimConfig& cfg);

    // buf <- mu*buf + g;  p <- p - lr*(g + mu*buf)   (nesterov)
    //                     p <- p - lr*buf            (plain momentum)
    // with g = grad + weight_decay*p applied to decayable kinds beforehand
    void step(double lr);
    void zero_grad();

    const std::vector<Param>& params() const { return params_; }
    std::vector<double>& buffer(size_t i) { return buf_[i]; }

private:
    std::vector<Param> params_;
    std::vector<std::vector<double>> buf_;
    OptimConfig cfg_;
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double eval_acc = 0.0;
    double wall_seconds = 0.0;
};

struct TrainState {
    int next_epoch = 0;
    std::string rng_hex;  // shuffle stream state at the epoch boundary
    double best_eval_acc = -1.0;
    std::vector<EpochMetrics> history;
};

struct TrainResult {
    TrainState state;
    double final_eval_acc = 0.0;
    std::string best_ckpt_path;
    std::string last_ckpt_path;
    std::string metrics_path;
};

std::string metrics_csv(const std::vector<EpochMetrics>& history);

double evaluate_accuracy(Model& model, const Dataset& ds, int batch_size,
                         const ForwardOptions& base_opts = {});

// Full checkpoint: parameters, BN running stats, optimizer momentum buffers,
// trainer state in the header. `opt`/`state` may be null for model-only files.
void checkpoint_save(Model& model, SgdOptimizer* opt, const TrainState* state,
                     const std::string& path);
void checkpoint_load(const std::string& path, Model& model, SgdOptimizer* opt, TrainState* state);

// Runs epochs [state.next_epoch, cfg.total_epochs). Writes last.ckpt,
// best.ckpt and metrics.csv under out_dir after every epoch.
TrainResult train(Model& model, SgdOptimizer& opt, const Dataset& train_ds, const Dataset& eval_ds,
                  const OptimConfig& cfg, const std::string& out_dir, uint64_t seed,
                  TrainState state = {},
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace lesa
