#include "lesa/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "lesa/serialize.hpp"

namespace lesa {

void OptimConfig::validate() const {
    if (lr_init <= 0.0) throw ConfigError("optim: lr_init must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs) {
        throw ConfigError("optim: warmup_epochs must satisfy 0 <= warmup < total_epochs");
    }
    if (total_epochs < 1) throw ConfigError("optim: total_epochs must be positive");
    if (batch_size < 1) throw ConfigError("optim: batch_size must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be non-negative");
}

double lr_schedule(const OptimConfig& cfg, double t) {
    const double total = static_cast<double>(cfg.total_epochs);
    const double warm = static_cast<double>(cfg.warmup_epochs);
    if (t < 0.0 || t > total) throw Error("lr_schedule: t=" + std::to_string(t) + " outside [0,total]");
    if (t < warm) return cfg.lr_init * (t / warm);
    const double u = (t - warm) / (total - warm);
    return cfg.lr_init * 0.5 * (1.0 + std::cos(M_PI * u));
}

SgdOptimizer::SgdOptimizer(std::vector<Param> params, const OptimConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    buf_.reserve(params_.size());
    for (const auto& p : params_) buf_.emplace_back(static_cast<size_t>(p.t->numel()), 0.0);
}

void SgdOptimizer::step(double lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.t->has_grad()) throw Error("sgd step: missing grad for parameter '" + p.name + "'");
        const bool decay = cfg_.weight_decay > 0.0 && p.kind == ParamKind::Weight;
        const double mu = cfg_.momentum;
        double* w = p.t->data.data();
        const double* gr = p.t->grad.data();
        double* buf = buf_[i].data();
        const int64_t n = p.t->numel();
        for (int64_t j = 0; j < n; ++j) {
            double g = gr[j];
            if (decay) g += cfg_.weight_decay * w[j];
            buf[j] = mu * buf[j] + g;
            if (cfg_.nesterov) {
                w[j] -= lr * (g + mu * buf[j]);
            } else {
                w[j] -= lr * buf[j];
            }
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.t->zero_grad();
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,train_acc,eval_acc,wall_seconds\n";
    char buf[512];
    for (const auto& m : history) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", m.epoch, m.lr,
                      m.train_loss, m.train_acc, m.eval_acc, m.wall_seconds);
        os << buf;
    }
    return os.str();
}

namespace {

int64_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const int64_t B = logits.dim(0), K = logits.dim(1);
    int64_t correct = 0;
    for (int64_t b = 0; b < B; ++b) {
        const double* row = logits.data.data() + b * K;
        int64_t best = 0;
        for (int64_t j = 1; j < K; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (best == labels[static_cast<size_t>(b)]) ++correct;
    }
    return correct;
}

}  // namespace

double evaluate_accuracy(Model& model, const Dataset& ds, int batch_size,
                         const ForwardOptions& base_opts) {
    if (ds.count == 0) throw Error("evaluate_accuracy: empty dataset");
    ForwardOptions opts = base_opts;
    opts.train = false;
    int64_t correct = 0;
    std::vector<int64_t> idx(static_cast<size_t>(ds.count));
    for (int64_t i = 0; i < ds.count; ++i) idx[static_cast<size_t>(i)] = i;
    std::vector<int> labels;
    for (int64_t at = 0; at < ds.count; at += batch_size) {
        const int64_t n = std::min<int64_t>(batch_size, ds.count - at);
        TensorPtr batch = make_batch(ds, idx.data() + at, n, nullptr, labels);
        Graph g(false);
        TensorPtr logits = model.forward(g, batch, opts);
        correct += count_correct(*logits, labels);
    }
    return static_cast<double>(correct) / static_cast<double>(ds.count);
}

void checkpoint_save(Model& model, SgdOptimizer* opt, const TrainState* state,
                     const std::string& path) {
    Checkpoint ckpt;
    ckpt.arch_text = model.spec.canonical_text();
    for (const auto& p : model.parameters()) {
        auto& t = ckpt.add(p.name, p.t->shape);
        t.data = p.t->data;
    }
    for (auto& [name, bn] : model.named_bn_states()) {
        const int64_t c = static_cast<int64_t>(bn->mean.size());
        if (bn->initialized) {
            auto& tm = ckpt.add(name + ".running_mean", {c});
            tm.data = bn->mean;
            auto& tv = ckpt.add(name + ".running_var", {c});
            tv.data = bn->var;
        }
        auto& ti = ckpt.add(name + ".initialized", {1});
        ti.data[0] = bn->initialized ? 1.0 : 0.0;
    }
    if (opt) {
        const auto& params = opt->params();
        for (size_t i = 0; i < params.size(); ++i) {
            auto& t = ckpt.add("optim." + params[i].name + ".momentum", params[i].t->shape);
            t.data = opt->buffer(i);
        }
    }
    nlohmann::json extra;
    if (state) {
        extra["epoch"] = state->next_epoch;
        extra["rng"] = state->rng_hex;
        extra["best_eval_acc"] = state->best_eval_acc;
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& m : state->history) {
            hist.push_back({m.epoch, m.lr, m.train_loss, m.train_acc, m.eval_acc, m.wall_seconds});
        }
        extra["history"] = std::move(hist);
    }
    ckpt.extra = std::move(extra);
    write_checkpoint(path, ckpt);
}

namespace {

void arch_mismatch(const std::string& expected, const std::string& found) {
    std::istringstream a(expected), b(found);
    std::string la, lb, diff;
    while (true) {
        const bool ga = static_cast<bool>(std::getline(a, la));
        const bool gb = static_cast<bool>(std::getline(b, lb));
        if (!ga && !gb) break;
        if (!ga) la.clear();
        if (!gb) lb.clear();
        if (la != lb) {
            diff = "first differing line: expected '" + la + "' vs checkpoint '" + lb + "'";
            break;
        }
    }
    throw ConfigError("checkpoint architecture does not match the configured model; " + diff +
                      "\n--- configured ---\n" + expected + "--- checkpoint ---\n" + found);
}

}  // namespace

void checkpoint_load(const std::string& path, Model& model, SgdOptimizer* opt, TrainState* state) {
    Checkpoint ckpt = read_checkpoint(path);
    const std::string expected = model.spec.canonical_text();
    if (ckpt.arch_text != expected) arch_mismatch(expected, ckpt.arch_text);
    for (const auto& p : model.parameters()) {
        const NamedTensor* t = ckpt.find(p.name);
        if (!t) throw IoError("checkpoint missing tensor '" + p.name + "': " + path);
        if (t->shape != p.t->shape) {
            throw IoError("checkpoint tensor '" + p.name + "' has shape " + shape_str(t->shape) +
                          ", expected " + shape_str(p.t->shape));
        }
        p.t->data = t->data;
    }
    for (auto& [name, bn] : model.named_bn_states()) {
        const NamedTensor* ti = ckpt.find(name + ".initialized");
        if (!ti) throw IoError("checkpoint missing tensor '" + name + ".initialized': " + path);
        bn->initialized = ti->data[0] != 0.0;
        if (bn->initialized) {
            const NamedTensor* tm = ckpt.find(name + ".running_mean");
            const NamedTensor* tv = ckpt.find(name + ".running_var");
            if (!tm || !tv) throw IoError("checkpoint missing running stats for '" + name + "': " + path);
            bn->mean = tm->data;
            bn->var = tv->data;
        } else {
            bn->mean.clear();
            bn->var.clear();
        }
    }
    if (opt) {
        const auto& params = opt->params();
        for (size_t i = 0; i < params.size(); ++i) {
            const NamedTensor* t = ckpt.find("optim." + params[i].name + ".momentum");
            if (!t) throw IoError("checkpoint missing optimizer buffer for '" + params[i].name + "'");
            opt->buffer(i) = t->data;
        }
    }
    if (state) {
        state->next_epoch = ckpt.extra.value("epoch", 0);
        state->rng_hex = ckpt.extra.value("rng", std::string());
        state->best_eval_acc = ckpt.extra.value("best_eval_acc", -1.0);
        state->history.clear();
        if (ckpt.extra.contains("history")) {
            for (const auto& row : ckpt.extra["history"]) {
                EpochMetrics m;
                m.epoch = row.at(0).get<int>();
                m.lr = row.at(1).get<double>();
                m.train_loss = row.at(2).get<double>();
                m.train_acc = row.at(3).get<double>();
                m.eval_acc = row.at(4).get<double>();
                m.wall_seconds = row.at(5).get<double>();
                state->history.push_back(m);
            }
        }
    }
}

TrainResult train(Model& model, SgdOptimizer& opt, const Dataset& train_ds, const Dataset& eval_ds,
                  const OptimConfig& cfg, const std::string& out_dir, uint64_t seed, TrainState state,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
    if (train_ds.count == 0 || eval_ds.count == 0) throw Error("train: datasets must be non-empty");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create out_dir " + out_dir + ": " + ec.message());

    Rng rng(seed);
    if (!state.rng_hex.empty()) rng.restore_hex(state.rng_hex);

    TrainResult result;
    result.best_ckpt_path = out_dir + "/best.ckpt";
    result.last_ckpt_path = out_dir + "/last.ckpt";
    result.metrics_path = out_dir + "/metrics.csv";

    std::vector<int64_t> idx(static_cast<size_t>(train_ds.count));
    for (int64_t i = 0; i < train_ds.count; ++i) idx[static_cast<size_t>(i)] = i;
    std::vector<int> labels;
    std::vector<uint8_t> flips;

    for (int epoch = state.next_epoch; epoch < cfg.total_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // re-derive the permutation from the identity so a resumed run
        // shuffles exactly like the uninterrupted one
        for (int64_t i = 0; i < train_ds.count; ++i) idx[static_cast<size_t>(i)] = i;
        rng.shuffle(idx);
        flips.assign(idx.size(), 0);
        if (cfg.hflip) {
            for (auto& f : flips) f = rng.uniform() < 0.5 ? 1 : 0;
        }
        double loss_sum = 0.0;
        int64_t correct = 0;
        const double epoch_lr =
            cfg.per_step_schedule ? 0.0 : lr_schedule(cfg, static_cast<double>(epoch));
        const int64_t steps_per_epoch = (train_ds.count + cfg.batch_size - 1) / cfg.batch_size;
        int64_t step_in_epoch = 0;
        for (int64_t at = 0; at < train_ds.count; at += cfg.batch_size, ++step_in_epoch) {
            const int64_t n = std::min<int64_t>(cfg.batch_size, train_ds.count - at);
            TensorPtr batch = make_batch(train_ds, idx.data() + at, n,
                                         cfg.hflip ? flips.data() + at : nullptr, labels);
            double lr = epoch_lr;
            if (cfg.per_step_schedule) {
                const double t = epoch + static_cast<double>(step_in_epoch) / static_cast<double>(steps_per_epoch);
                lr = lr_schedule(cfg, t);
            }
            Graph g;
            ForwardOptions opts;
            opts.train = true;
            TensorPtr logits = model.forward(g, batch, opts);
            TensorPtr loss = g.cross_entropy(logits, labels);
            if (!std::isfinite(loss->data[0])) {
                const std::string where = g.first_nonfinite_node();
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   "; first non-finite output at node '" +
                                   (where.empty() ? "<loss>" : where) + "'");
            }
            g.backward(loss);
            opt.step(lr);
            opt.zero_grad();
            loss_sum += loss->data[0] * static_cast<double>(n);
            correct += count_correct(*logits, labels);
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = cfg.per_step_schedule ? lr_schedule(cfg, static_cast<double>(epoch)) : epoch_lr;
        m.train_loss = loss_sum / static_cast<double>(train_ds.count);
        m.train_acc = static_cast<double>(correct) / static_cast<double>(train_ds.count);
        m.eval_acc = evaluate_accuracy(model, eval_ds, cfg.batch_size);
        m.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.history.push_back(m);
        state.next_epoch = epoch + 1;
        state.rng_hex = rng.state_hex();
        result.final_eval_acc = m.eval_acc;
        if (m.eval_acc > state.best_eval_acc) {
            state.best_eval_acc = m.eval_acc;
            checkpoint_save(model, &opt, &state, result.best_ckpt_path);
        }
        checkpoint_save(model, &opt, &state, result.last_ckpt_path);
        atomic_write(result.metrics_path, metrics_csv(state.history));
        if (on_epoch) on_epoch(m);
    }
    result.state = std::move(state);
    return result;
}

}  // namespace lesa
