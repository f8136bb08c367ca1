#include "lesa/instrument.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "lesa/serialize.hpp"
#include "lesa/trainer.hpp"

namespace lesa {

std::string WeightReport::to_csv() const {
    std::ostringstream os;
    os << "layer_id,kind,unary_pct,binary_pct\n";
    char buf[256];
    for (const auto& r : per_layer) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g\n", r.layer_id.c_str(), r.kind.c_str(),
                      r.unary_pct, r.binary_pct);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "overall,,%.17g,%.17g\n", overall_unary_pct, overall_binary_pct);
    os << buf;
    return os.str();
}

nlohmann::json WeightReport::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& r : per_layer) {
        layers.push_back({{"layer_id", r.layer_id},
                          {"kind", r.kind},
                          {"unary_pct", r.unary_pct},
                          {"binary_pct", r.binary_pct}});
    }
    return {{"per_layer", layers},
            {"overall_unary_pct", overall_unary_pct},
            {"overall_binary_pct", overall_binary_pct},
            {"sample_count", sample_count}};
}

void WeightAccumulator::absorb(const std::vector<LayerRecord>& records, int64_t samples) {
    if (layers.empty()) {
        for (const auto& r : records) layers.push_back({r.id, r.kind, 0.0, 0.0, 0});
    }
    if (records.size() != layers.size()) throw Error("weight tracking: layer set changed between batches");
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].id != layers[i].id) throw Error("weight tracking: layer order changed between batches");
        layers[i].unary_sum += records[i].unary_sum;
        layers[i].binary_sum += records[i].binary_sum;
        layers[i].count += records[i].count;
    }
    sample_count += samples;
}

void WeightAccumulator::merge(const WeightAccumulator& other) {
    if (layers.empty()) {
        *this = other;
        return;
    }
    if (other.layers.empty()) return;
    if (other.layers.size() != layers.size()) throw Error("weight tracking: cannot merge different layer sets");
    for (size_t i = 0; i < layers.size(); ++i) {
        layers[i].unary_sum += other.layers[i].unary_sum;
        layers[i].binary_sum += other.layers[i].binary_sum;
        layers[i].count += other.layers[i].count;
    }
    sample_count += other.sample_count;
}

WeightReport WeightAccumulator::report() const {
    if (layers.empty()) throw Error("weight tracking: model has no instrumented (sa/lesa) layers");
    WeightReport rep;
    rep.sample_count = sample_count;
    double us = 0.0, bs = 0.0;
    for (const auto& l : layers) {
        WeightRow row;
        row.layer_id = l.id;
        row.kind = l.kind;
        row.unary_pct = 100.0 * l.unary_sum / static_cast<double>(l.count);
        row.binary_pct = 100.0 * l.binary_sum / static_cast<double>(l.count);
        us += row.unary_pct;
        bs += row.binary_pct;
        rep.per_layer.push_back(std::move(row));
    }
    rep.overall_unary_pct = us / static_cast<double>(layers.size());
    rep.overall_binary_pct = bs / static_cast<double>(layers.size());
    return rep;
}

WeightReport collect_layer_stats(Model& model, const TensorPtr& batch) {
    if (!model.has_instrumented_layer()) {
        throw Error("collect_layer_stats: model has no instrumented (sa/lesa) layers");
    }
    Graph g(false);
    std::vector<LayerRecord> records;
    ForwardOptions opts;
    opts.collect_stats = true;
    opts.records = &records;
    model.forward(g, batch, opts);
    WeightAccumulator acc;
    acc.absorb(records, batch->dim(0));
    return acc.report();
}

WeightReport run_weight_tracking(Model& model, const Dataset& ds, int batch_size, int max_batches) {
    if (ds.count == 0) throw Error("run_weight_tracking: empty dataset");
    if (!model.has_instrumented_layer()) {
        throw Error("run_weight_tracking: model has no instrumented (sa/lesa) layers");
    }
    WeightAccumulator acc;
    std::vector<int64_t> idx(static_cast<size_t>(ds.count));
    for (int64_t i = 0; i < ds.count; ++i) idx[static_cast<size_t>(i)] = i;
    std::vector<int> labels;
    int batches = 0;
    for (int64_t at = 0; at < ds.count; at += batch_size) {
        if (max_batches >= 0 && batches >= max_batches) break;
        const int64_t n = std::min<int64_t>(batch_size, ds.count - at);
        TensorPtr batch = make_batch(ds, idx.data() + at, n, nullptr, labels);
        Graph g(false);
        std::vector<LayerRecord> records;
        ForwardOptions opts;
        opts.collect_stats = true;
        opts.records = &records;
        model.forward(g, batch, opts);
        acc.absorb(records, n);
        ++batches;
    }
    return acc.report();
}

AblationResult run_unary_ablation(Model& model, const Dataset& ds, bool renormalize, int batch_size) {
    if (ds.count == 0) throw Error("run_unary_ablation: empty dataset");
    if (!model.has_sa_layer()) {
        throw Error("run_unary_ablation: model has no self-attention layers to ablate");
    }
    WeightAccumulator acc;
    std::vector<int64_t> idx(static_cast<size_t>(ds.count));
    for (int64_t i = 0; i < ds.count; ++i) idx[static_cast<size_t>(i)] = i;
    std::vector<int> labels;
    int64_t base_correct = 0, abl_correct = 0;
    for (int64_t at = 0; at < ds.count; at += batch_size) {
        const int64_t n = std::min<int64_t>(batch_size, ds.count - at);
        TensorPtr batch = make_batch(ds, idx.data() + at, n, nullptr, labels);
        {
            Graph g(false);
            std::vector<LayerRecord> records;
            ForwardOptions opts;
            opts.collect_stats = true;
            opts.records = &records;
            TensorPtr logits = model.forward(g, batch, opts);
            acc.absorb(records, n);
            const int64_t K = logits->dim(1);
            for (int64_t b = 0; b < n; ++b) {
                const double* row = logits->data.data() + b * K;
                int64_t best = 0;
                for (int64_t j = 1; j < K; ++j) {
                    if (row[j] > row[best]) best = j;
                }
                if (best == labels[static_cast<size_t>(b)]) ++base_correct;
            }
        }
        {
            Graph g(false);
            ForwardOptions opts;
            opts.ablate_unary = true;
            opts.renormalize = renormalize;
            TensorPtr logits = model.forward(g, batch, opts);
            const int64_t K = logits->dim(1);
            for (int64_t b = 0; b < n; ++b) {
                const double* row = logits->data.data() + b * K;
                int64_t best = 0;
                for (int64_t j = 1; j < K; ++j) {
                    if (row[j] > row[best]) best = j;
                }
                if (best == labels[static_cast<size_t>(b)]) ++abl_correct;
            }
        }
    }
    AblationResult res;
    res.baseline_accuracy = static_cast<double>(base_correct) / static_cast<double>(ds.count);
    res.ablated_accuracy = static_cast<double>(abl_correct) / static_cast<double>(ds.count);
    double bs = 0.0;
    int64_t sa_layers = 0;
    for (const auto& l : acc.layers) {
        if (l.kind == "sa") {
            bs += 100.0 * l.binary_sum / static_cast<double>(l.count);
            ++sa_layers;
        }
    }
    res.residual_weight_pct = sa_layers > 0 ? bs / static_cast<double>(sa_layers) : 0.0;
    return res;
}

namespace {

void write_map(const std::string& dir, const std::string& id, const std::string& what,
               const TensorPtr& t, std::vector<std::string>& out) {
    if (!t) return;
    Tensor squeezed;
    if (t->rank() == 4 && t->dim(0) == 1) {
        squeezed.shape = {t->dim(1), t->dim(2), t->dim(3)};
        squeezed.data = t->data;
    } else {
        squeezed.shape = t->shape;
        squeezed.data = t->data;
    }
    const std::string path = dir + "/" + id + "." + what + ".lten";
    write_tensor_file(path, squeezed);
    out.push_back(path);
}

}  // namespace

std::vector<std::string> export_contribution_maps(Model& model, const Tensor& image,
                                                  const std::string& out_dir) {
    if (image.rank() != 3) throw ShapeError("export_contribution_maps: image must be [C,H,W]");
    if (!model.has_instrumented_layer()) {
        throw Error("export_contribution_maps: model has no instrumented (sa/lesa) layers");
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create directory " + out_dir + ": " + ec.message());
    auto batch = tensor({1, image.dim(0), image.dim(1), image.dim(2)});
    batch->data = image.data;
    Graph g(false);
    std::vector<LayerRecord> records;
    ForwardOptions opts;
    opts.collect_stats = true;
    opts.capture_maps = true;
    opts.records = &records;
    model.forward(g, batch, opts);
    std::vector<std::string> written;
    for (const auto& r : records) {
        if (r.kind == "sa") {
            write_map(out_dir, r.id, "unary", r.unary_map, written);
            write_map(out_dir, r.id, "binary", r.binary_map, written);
        } else {
            write_map(out_dir, r.id, "m", r.m_map, written);
            write_map(out_dir, r.id, "b", r.b_map, written);
            write_map(out_dir, r.id, "omega", r.omega_map, written);
        }
        write_map(out_dir, r.id, "out", r.out_map, written);
    }
    return written;
}

}  // namespace lesa
