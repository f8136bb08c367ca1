#include "lesa/model.hpp"

#include <cmath>
#include <sstream>

namespace lesa {

std::string spatial_op_name(SpatialOp op) {
    switch (op) {
        case SpatialOp::Conv: return "conv";
        case SpatialOp::SA: return "sa";
        case SpatialOp::Lesa: return "lesa";
        case SpatialOp::LesaStatic: return "lesa_static";
    }
    throw Error("unreachable spatial op");
}

SpatialOp spatial_op_from_name(const std::string& name) {
    if (name == "conv") return SpatialOp::Conv;
    if (name == "sa") return SpatialOp::SA;
    if (name == "lesa") return SpatialOp::Lesa;
    if (name == "lesa_static") return SpatialOp::LesaStatic;
    throw ConfigError("unknown spatial operator '" + name + "' (expected conv|sa|lesa|lesa_static)");
}

namespace {

int conv_out_size(int sz, int k, int stride, int pad) { return (sz + 2 * pad - k) / stride + 1; }

int64_t stage_width(const BackboneSpec& s, int stage) { return s.base_channels << stage; }

}  // namespace

void BackboneSpec::validate() const {
    if (stage_blocks.size() != 4) throw ConfigError("backbone: stage_blocks must list 4 stages");
    for (int n : stage_blocks) {
        if (n < 1) throw ConfigError("backbone: every stage needs at least one block");
    }
    if (base_channels < 1) throw ConfigError("backbone: base_channels must be positive");
    if (ops[0] != SpatialOp::Conv || ops[1] != SpatialOp::Conv) {
        throw ConfigError("backbone: operator replacement is only permitted in stages 3 and 4");
    }
    if (heads < 1) throw ConfigError("backbone: heads must be positive");
    for (int s = 2; s < 4; ++s) {
        if (ops[static_cast<size_t>(s)] != SpatialOp::Conv && stage_width(*this, s) % heads != 0) {
            throw ConfigError("backbone: head count " + std::to_string(heads) +
                              " does not divide stage " + std::to_string(s + 1) + " channels " +
                              std::to_string(stage_width(*this, s)));
        }
    }
    if (num_classes < 2) throw ConfigError("backbone: num_classes must be at least 2");
    if (input_size < 8) throw ConfigError("backbone: input_size must be at least 8");
    if (input_channels < 1) throw ConfigError("backbone: input_channels must be positive");
    if (unary_kernel < 1 || unary_kernel % 2 == 0) {
        throw ConfigError("backbone: unary_kernel must be odd, got " + std::to_string(unary_kernel));
    }
}

std::string BackboneSpec::canonical_text() const {
    std::ostringstream os;
    os << "arch=lesa-backbone-v1\n";
    os << "base_channels=" << base_channels << "\n";
    os << "heads=" << heads << "\n";
    os << "input_channels=" << input_channels << "\n";
    os << "input_size=" << input_size << "\n";
    os << "num_classes=" << num_classes << "\n";
    for (int s = 0; s < 4; ++s) {
        os << "op.stage" << (s + 1) << "=" << spatial_op_name(ops[static_cast<size_t>(s)]) << "\n";
    }
    os << "stage_blocks=";
    for (size_t i = 0; i < stage_blocks.size(); ++i) os << (i ? "," : "") << stage_blocks[i];
    os << "\n";
    os << "unary_kernel=" << unary_kernel << "\n";
    os << "use_position=" << (use_position ? "true" : "false") << "\n";
    return os.str();
}

BackboneSpec BackboneSpec::parse_canonical_text(const std::string& text) {
    BackboneSpec spec;
    std::istringstream is(text);
    std::string line;
    bool saw_arch = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("architecture text: bad line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "arch") {
            if (val != "lesa-backbone-v1") throw ConfigError("architecture text: unknown arch '" + val + "'");
            saw_arch = true;
        } else if (key == "base_channels") {
            spec.base_channels = std::stoll(val);
        } else if (key == "heads") {
            spec.heads = std::stoi(val);
        } else if (key == "input_channels") {
            spec.input_channels = std::stoi(val);
        } else if (key == "input_size") {
            spec.input_size = std::stoi(val);
        } else if (key == "num_classes") {
            spec.num_classes = std::stoi(val);
        } else if (key.rfind("op.stage", 0) == 0) {
            const int s = std::stoi(key.substr(8));
            if (s < 1 || s > 4) throw ConfigError("architecture text: bad stage in '" + key + "'");
            spec.ops[static_cast<size_t>(s - 1)] = spatial_op_from_name(val);
        } else if (key == "stage_blocks") {
            spec.stage_blocks.clear();
            std::istringstream vs(val);
            std::string tok;
            while (std::getline(vs, tok, ',')) spec.stage_blocks.push_back(std::stoi(tok));
        } else if (key == "unary_kernel") {
            spec.unary_kernel = std::stoi(val);
        } else if (key == "use_position") {
            spec.use_position = val == "true";
        } else {
            throw ConfigError("architecture text: unknown key '" + key + "'");
        }
    }
    if (!saw_arch) throw ConfigError("architecture text: missing arch line");
    spec.validate();
    return spec;
}

Bottleneck::Bottleneck(std::string id_, int64_t in_ch, int64_t width, int stride_, SpatialOp op_,
                       int heads, int fmap, int unary_kernel, bool use_position, Rng& rng)
    : id(std::move(id_)), op(op_), stride(stride_) {
    if (op != SpatialOp::Conv && stride != 1) {
        throw ConfigError("bottleneck " + id + ": attention-typed blocks must have stride 1");
    }
    const int64_t out_ch = width * 4;
    reduce = ConvLayer(in_ch, width, 1, 1, 1, rng);
    bn1 = BNLayer(width);
    if (op == SpatialOp::Conv) {
        conv3.emplace(width, width, 3, stride, 1, rng);
    } else {
        AttentionConfig ac;
        ac.d_in = ac.d_qk = ac.d_out = width;
        ac.heads = heads;
        ac.H = ac.W = fmap;
        ac.use_position = use_position;
        if (op == SpatialOp::SA) {
            attn.emplace(ac, rng);
        } else {
            lesa.emplace(ac, unary_kernel,
                         op == SpatialOp::Lesa ? LesaMode::Dynamic : LesaMode::Static, rng);
        }
    }
    bn2 = BNLayer(width);
    expand = ConvLayer(width, out_ch, 1, 1, 1, rng);
    bn3 = BNLayer(out_ch);
    if (in_ch != out_ch || stride != 1) {
        short_conv.emplace(in_ch, out_ch, 1, stride, 1, rng);
        short_bn.emplace(out_ch);
    }
}

TensorPtr Bottleneck::forward(Graph& g, const TensorPtr& x, const ForwardOptions& opts) {
    ScopedName scope(g, id);
    TensorPtr t = reduce.forward(g, x);
    t = bn1.forward(g, t, opts.train);
    t = g.relu(t);

    const bool record = (opts.collect_stats || opts.capture_maps) && opts.records != nullptr;
    if (op == SpatialOp::Conv) {
        t = conv3->forward(g, t);
    } else if (op == SpatialOp::SA) {
        AttnMode mode = AttnMode::Full;
        if (opts.ablate_unary) mode = opts.renormalize ? AttnMode::AblateRenorm : AttnMode::AblateUnary;
        AttnCapture cap;
        cap.want_decomposition = opts.capture_maps;
        t = attention_forward(g, t, *attn, mode, record ? &cap : nullptr);
        if (record) {
            LayerRecord rec;
            rec.id = id;
            rec.kind = "sa";
            rec.unary_sum = cap.diag_sum;
            rec.binary_sum = static_cast<double>(cap.diag_count) - cap.diag_sum;
            rec.count = cap.diag_count;
            rec.unary_map = cap.unary;
            rec.binary_map = cap.binary;
            rec.out_map = t;
            opts.records->push_back(std::move(rec));
        }
    } else {
        LesaCapture cap;
        t = lesa_forward(g, t, *lesa, opts.train, record ? &cap : nullptr);
        if (record) {
            LayerRecord rec;
            rec.id = id;
            rec.kind = op == SpatialOp::Lesa ? "lesa" : "lesa_static";
            if (cap.omega) {
                rec.unary_sum = cap.unary_frac_sum;
                rec.binary_sum = cap.binary_frac_sum;
                rec.count = cap.omega_count;
            } else {
                // static variant merges with equal weights (the omega==1 analogue)
                rec.count = cap.b ? cap.b->numel() : 0;
                rec.unary_sum = 0.5 * static_cast<double>(rec.count);
                rec.binary_sum = 0.5 * static_cast<double>(rec.count);
            }
            rec.m_map = cap.m;
            rec.b_map = cap.b;
            rec.omega_map = cap.omega;
            rec.out_map = t;
            opts.records->push_back(std::move(rec));
        }
    }
    t = bn2.forward(g, t, opts.train);
    t = g.relu(t);
    t = expand.forward(g, t);
    t = bn3.forward(g, t, opts.train);

    TensorPtr sc = x;
    if (short_conv) {
        sc = short_conv->forward(g, x);
        sc = short_bn->forward(g, sc, opts.train);
    }
    return g.relu(g.add(t, sc));
}

void Bottleneck::collect(std::vector<Param>& out) const {
    out.push_back({id + ".reduce.w", reduce.w, ParamKind::Weight});
    bn1.collect(id + ".bn1", out);
    if (op == SpatialOp::Conv) {
        out.push_back({id + ".conv3.w", conv3->w, ParamKind::Weight});
    } else if (op == SpatialOp::SA) {
        out.push_back({id + ".attn.w_q", attn->W_q, ParamKind::Weight});
        out.push_back({id + ".attn.w_k", attn->W_k, ParamKind::Weight});
        out.push_back({id + ".attn.w_v", attn->W_v, ParamKind::Weight});
        if (attn->cfg.use_position) {
            out.push_back({id + ".attn.r_row", attn->r_row, ParamKind::PosEmb});
            out.push_back({id + ".attn.r_col", attn->r_col, ParamKind::PosEmb});
        }
    } else {
        const auto& a = lesa->attention;
        out.push_back({id + ".lesa.attn.w_q", a.W_q, ParamKind::Weight});
        out.push_back({id + ".lesa.attn.w_k", a.W_k, ParamKind::Weight});
        out.push_back({id + ".lesa.attn.w_v", a.W_v, ParamKind::Weight});
        if (a.cfg.use_position) {
            out.push_back({id + ".lesa.attn.r_row", a.r_row, ParamKind::PosEmb});
            out.push_back({id + ".lesa.attn.r_col", a.r_col, ParamKind::PosEmb});
        }
        out.push_back({id + ".lesa.unary.w_gk", lesa->unary.W_g_k, ParamKind::Weight});
        out.push_back({id + ".lesa.unary.w_11", lesa->unary.W_1_1, ParamKind::Weight});
        if (lesa->gate) {
            lesa->gate->bn0.collect(id + ".lesa.gate.bn0", out);
            out.push_back({id + ".lesa.gate.fc1", lesa->gate->fc1, ParamKind::Weight});
            lesa->gate->bn1.collect(id + ".lesa.gate.bn1", out);
            out.push_back({id + ".lesa.gate.fc2", lesa->gate->fc2, ParamKind::Weight});
            lesa->gate->bn2.collect(id + ".lesa.gate.bn2", out);
        }
    }
    bn2.collect(id + ".bn2", out);
    out.push_back({id + ".expand.w", expand.w, ParamKind::Weight});
    bn3.collect(id + ".bn3", out);
    if (short_conv) {
        out.push_back({id + ".short.w", short_conv->w, ParamKind::Weight});
        short_bn->collect(id + ".short_bn", out);
    }
}

Model build_backbone(const BackboneSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Model m;
    m.spec = spec;
    m.stem = ConvLayer(spec.input_channels, spec.base_channels, 3, 2, 1, rng);
    m.stem_bn = BNLayer(spec.base_channels);
    int fmap = conv_out_size(spec.input_size, 3, 2, 1);
    int64_t in_ch = spec.base_channels;
    for (int s = 0; s < 4; ++s) {
        const int64_t width = stage_width(spec, s);
        const SpatialOp stage_op = spec.ops[static_cast<size_t>(s)];
        // stage stride: stage 1 none, stages 2-4 downsample; an attention-typed
        // final stage runs at stride 1
        int stage_stride = s == 0 ? 1 : 2;
        if (s == 3 && stage_op != SpatialOp::Conv) stage_stride = 1;
        std::vector<Bottleneck> blocks;
        for (int b = 0; b < spec.stage_blocks[static_cast<size_t>(s)]; ++b) {
            const int stride = b == 0 ? stage_stride : 1;
            // stage 3 keeps its first (stride-2 conv) bottleneck unchanged
            SpatialOp block_op = stage_op;
            if (s == 2 && b == 0) block_op = SpatialOp::Conv;
            const int block_in_fmap = fmap;
            const std::string id = "s" + std::to_string(s + 1) + ".b" + std::to_string(b);
            blocks.emplace_back(id, in_ch, width, stride, block_op, spec.heads, block_in_fmap,
                                spec.unary_kernel, spec.use_position, rng);
            if (stride != 1) fmap = conv_out_size(fmap, 3, stride, 1);
            in_ch = width * 4;
        }
        m.stages.push_back(std::move(blocks));
    }
    const int64_t feat = in_ch;
    const double std_fc = 1.0 / std::sqrt(static_cast<double>(feat));
    m.fc_w = tensor({feat, spec.num_classes}, true);
    for (auto& v : m.fc_w->data) v = rng.normal(0.0, std_fc);
    m.fc_b = tensor({static_cast<int64_t>(spec.num_classes)}, true);
    return m;
}

TensorPtr Model::forward(Graph& g, const TensorPtr& images, const ForwardOptions& opts) {
    if (images->rank() != 4 || images->dim(1) != spec.input_channels ||
        images->dim(2) != spec.input_size || images->dim(3) != spec.input_size) {
        throw ShapeError("model forward: expected [B," + std::to_string(spec.input_channels) + "," +
                         std::to_string(spec.input_size) + "," + std::to_string(spec.input_size) +
                         "], got " + shape_str(images->shape));
    }
    TensorPtr t;
    {
        ScopedName scope(g, "stem");
        t = stem.forward(g, images);
        t = stem_bn.forward(g, t, opts.train);
        t = g.relu(t);
    }
    for (auto& stage : stages) {
        for (auto& block : stage) t = block.forward(g, t, opts);
    }
    ScopedName scope(g, "head");
    t = g.global_avg_pool(t);
    return g.linear(t, fc_w, fc_b);
}

std::vector<Param> Model::parameters() const {
    std::vector<Param> out;
    out.push_back({"stem.conv.w", stem.w, ParamKind::Weight});
    stem_bn.collect("stem.bn", out);
    for (const auto& stage : stages) {
        for (const auto& block : stage) block.collect(out);
    }
    out.push_back({"fc.w", fc_w, ParamKind::Weight});
    out.push_back({"fc.b", fc_b, ParamKind::Bias});
    return out;
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p.t->numel();
    return n;
}

std::vector<std::pair<std::string, BatchNormState*>> Model::named_bn_states() {
    std::vector<std::pair<std::string, BatchNormState*>> out;
    out.emplace_back("stem.bn", &stem_bn.state);
    for (auto& stage : stages) {
        for (auto& block : stage) {
            out.emplace_back(block.id + ".bn1", &block.bn1.state);
            if (block.lesa && block.lesa->gate) {
                out.emplace_back(block.id + ".lesa.gate.bn0", &block.lesa->gate->bn0.state);
                out.emplace_back(block.id + ".lesa.gate.bn1", &block.lesa->gate->bn1.state);
                out.emplace_back(block.id + ".lesa.gate.bn2", &block.lesa->gate->bn2.state);
            }
            out.emplace_back(block.id + ".bn2", &block.bn2.state);
            out.emplace_back(block.id + ".bn3", &block.bn3.state);
            if (block.short_bn) out.emplace_back(block.id + ".short_bn", &block.short_bn->state);
        }
    }
    return out;
}

bool Model::has_sa_layer() const {
    for (const auto& stage : stages) {
        for (const auto& block : stage) {
            if (block.op == SpatialOp::SA) return true;
        }
    }
    return false;
}

bool Model::has_instrumented_layer() const {
    for (const auto& stage : stages) {
        for (const auto& block : stage) {
            if (block.op != SpatialOp::Conv) return true;
        }
    }
    return false;
}

TensorPtr forward_classify(Graph& g, Model& model, const TensorPtr& batch, const ForwardOptions& opts) {
    return model.forward(g, batch, opts);
}

TensorPtr loss_ce(Graph& g, const TensorPtr& logits, const std::vector<int>& labels) {
    return g.cross_entropy(logits, labels);
}

}  // namespace lesa
