// lesa: train, evaluate and inspect LESA/self-attention/convolution backbones
// on desk-scale synthetic data.
//
// stdout carries machine-readable output only; diagnostics go to stderr.
// Exit codes: 0 ok, 1 generic/check failure, 2 config error, 3 numeric
// failure, 4 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "json.hpp"
#include "lesa/config.hpp"
#include "lesa/gradcheck.hpp"
#include "lesa/instrument.hpp"
#include "lesa/serialize.hpp"
#include "lesa/threading.hpp"

namespace {

using nlohmann::json;

struct CheckFailure {
    std::string message;
};

void apply_run_config(const lesa::RunConfig& run) { lesa::set_num_threads(run.threads); }

// deterministic runs use run.seed; otherwise draw an entropy seed and log it
// so the run can still be reproduced after the fact
uint64_t effective_seed(const lesa::RunConfig& run) {
    if (run.deterministic) return run.seed;
    std::random_device rd;
    const uint64_t s = (static_cast<uint64_t>(rd()) << 32) ^ rd();
    std::fprintf(stderr, "non-deterministic run: drew seed %llu\n",
                 static_cast<unsigned long long>(s));
    return s;
}

lesa::Model build_from_config(const lesa::ExperimentConfig& cfg, uint64_t seed) {
    return lesa::build_backbone(cfg.model, seed);
}

int cmd_gen_data(int classes, int count, int eval_count, int size, uint64_t seed,
                 const std::string& out) {
    if (eval_count <= 0) eval_count = std::max(1, count / 5);
    lesa::Dataset train = lesa::generate_synthetic(classes, count, size, seed);
    lesa::Dataset eval = lesa::generate_synthetic(classes, eval_count, size, seed + 1000003ULL);
    lesa::write_dataset_dir(out, train, eval);
    json j;
    j["dir"] = out;
    j["train_count"] = train.count;
    j["eval_count"] = eval.count;
    j["classes"] = classes;
    j["image_size"] = size;
    j["seed"] = seed;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    lesa::ExperimentConfig cfg = lesa::ExperimentConfig::load_file(config_path);
    apply_run_config(cfg.run);
    const uint64_t seed = effective_seed(cfg.run);
    auto [train_ds, eval_ds] = lesa::load_data(cfg.data);
    lesa::Model model = build_from_config(cfg, seed);
    lesa::SgdOptimizer opt(model.parameters(), cfg.optim);
    lesa::TrainState state;
    if (!resume.empty()) {
        lesa::checkpoint_load(resume, model, &opt, &state);
    }
    lesa::TrainResult result = lesa::train(model, opt, train_ds, eval_ds, cfg.optim, cfg.run.out_dir,
                                           seed, std::move(state), [](const lesa::EpochMetrics& m) {
                                               std::fprintf(stderr,
                                                            "epoch %d lr %.6f train_loss %.4f train_acc %.4f "
                                                            "eval_acc %.4f (%.1fs)\n",
                                                            m.epoch, m.lr, m.train_loss, m.train_acc,
                                                            m.eval_acc, m.wall_seconds);
                                           });
    json j;
    j["epochs"] = result.state.next_epoch;
    j["best_eval_acc"] = result.state.best_eval_acc;
    j["final_eval_acc"] = result.final_eval_acc;
    j["best_ckpt"] = result.best_ckpt_path;
    j["last_ckpt"] = result.last_ckpt_path;
    j["metrics_csv"] = result.metrics_path;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, const std::string& split) {
    lesa::ExperimentConfig cfg = lesa::ExperimentConfig::load_file(config_path);
    apply_run_config(cfg.run);
    auto [train_ds, eval_ds] = lesa::load_data(cfg.data);
    const lesa::Dataset& ds = split == "train" ? train_ds : eval_ds;
    lesa::Model model = build_from_config(cfg, cfg.run.seed);
    lesa::checkpoint_load(ckpt, model, nullptr, nullptr);
    const double acc = lesa::evaluate_accuracy(model, ds, cfg.optim.batch_size);
    json j;
    j["accuracy"] = acc;
    j["samples"] = ds.count;
    j["split"] = split;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_inspect(const std::string& config_path, const std::string& ckpt, bool ablate, bool renorm,
                const std::string& split, int max_batches) {
    lesa::ExperimentConfig cfg = lesa::ExperimentConfig::load_file(config_path);
    apply_run_config(cfg.run);
    auto [train_ds, eval_ds] = lesa::load_data(cfg.data);
    const lesa::Dataset& ds = split == "train" ? train_ds : eval_ds;
    lesa::Model model = build_from_config(cfg, cfg.run.seed);
    lesa::checkpoint_load(ckpt, model, nullptr, nullptr);
    lesa::WeightReport report =
        lesa::run_weight_tracking(model, ds, cfg.optim.batch_size, max_batches);
    std::error_code ec;
    std::filesystem::create_directories(cfg.run.out_dir, ec);
    if (ec) throw lesa::IoError("cannot create out_dir " + cfg.run.out_dir + ": " + ec.message());
    const std::string csv_path = cfg.run.out_dir + "/weight_report.csv";
    lesa::atomic_write(csv_path, report.to_csv());
    json j = report.to_json();
    j["csv"] = csv_path;
    j["split"] = split;
    if (ablate) {
        lesa::AblationResult ab = lesa::run_unary_ablation(model, ds, renorm, cfg.optim.batch_size);
        j["ablation"] = {{"baseline_accuracy", ab.baseline_accuracy},
                         {"ablated_accuracy", ab.ablated_accuracy},
                         {"residual_weight_pct", ab.residual_weight_pct},
                         {"renormalize", renorm}};
    }
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& module, uint64_t seed, int instances) {
    const auto results = lesa::run_registered_gradchecks(module, seed, instances);
    bool all_pass = true;
    std::printf("op,max_rel_err,pass\n");
    for (const auto& r : results) {
        std::printf("%s,%.3e,%s\n", r.name.c_str(), r.max_rel_err, r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) throw CheckFailure{"gradcheck failed"};
    return 0;
}

int cmd_dump_maps(const std::string& ckpt, const std::string& image_path, const std::string& out) {
    // the checkpoint header is self-describing: rebuild the architecture from it
    lesa::CheckpointHeader hdr = lesa::read_checkpoint_header(ckpt);
    lesa::BackboneSpec spec = lesa::BackboneSpec::parse_canonical_text(hdr.arch_text);
    lesa::Model model = lesa::build_backbone(spec, 0);
    lesa::checkpoint_load(ckpt, model, nullptr, nullptr);
    lesa::Tensor image = lesa::read_tensor_file(image_path);
    if (image.rank() == 4 && image.dim(0) == 1) {
        image.shape = {image.dim(1), image.dim(2), image.dim(3)};
    }
    const auto files = lesa::export_contribution_maps(model, image, out);
    json j;
    j["out_dir"] = out;
    j["files"] = files;
    std::cout << j.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LESA backbones: locally enhanced self-attention at desk scale"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a seeded synthetic dataset directory");
    int classes = 10, count = 5000, eval_count = 0, size = 32;
    uint64_t gd_seed = 7;
    std::string gd_out;
    gen->add_option("--classes", classes, "number of classes")->capture_default_str();
    gen->add_option("--count", count, "training sample count")->capture_default_str();
    gen->add_option("--eval-count", eval_count, "eval sample count (default count/5)");
    gen->add_option("--size", size, "image side length (>= 16)")->capture_default_str();
    gen->add_option("--seed", gd_seed, "generator seed")->capture_default_str();
    gen->add_option("--out", gd_out, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train a backbone per the experiment config");
    std::string tr_config, tr_resume;
    tr->add_option("--config", tr_config, "experiment config file")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_config, ev_ckpt, ev_split = "eval";
    ev->add_option("--config", ev_config, "experiment config file")->required();
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--split", ev_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));

    auto* in = app.add_subcommand("inspect", "weight tracking report (and optional unary ablation)");
    std::string in_config, in_ckpt, in_split = "eval";
    bool in_ablate = false, in_renorm = false;
    int in_max_batches = -1;
    in->add_option("--config", in_config, "experiment config file")->required();
    in->add_option("--ckpt", in_ckpt, "checkpoint path")->required();
    in->add_flag("--ablate-unary", in_ablate, "also run the unary-ablation evaluation");
    in->add_flag("--renormalize", in_renorm, "re-softmax over the remaining logits when ablating");
    in->add_option("--split", in_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));
    in->add_option("--max-batches", in_max_batches, "limit tracked batches (-1 = all)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every registered op");
    std::string gc_module;
    uint64_t gc_seed = 20240501;
    int gc_instances = 3;
    gc->add_option("--module", gc_module, "substring filter on op names");
    gc->add_option("--seed", gc_seed, "base seed")->capture_default_str();
    gc->add_option("--instances", gc_instances, "instances per op")->capture_default_str();

    auto* dm = app.add_subcommand("dump-maps", "write per-layer contribution tensors for one image");
    std::string dm_ckpt, dm_image, dm_out;
    dm->add_option("--ckpt", dm_ckpt, "checkpoint path")->required();
    dm->add_option("--image", dm_image, "image tensor file [C,H,W]")->required();
    dm->add_option("--out", dm_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(classes, count, eval_count, size, gd_seed, gd_out);
        if (tr->parsed()) return cmd_train(tr_config, tr_resume);
        if (ev->parsed()) return cmd_eval(ev_config, ev_ckpt, ev_split);
        if (in->parsed()) return cmd_inspect(in_config, in_ckpt, in_ablate, in_renorm, in_split, in_max_batches);
        if (gc->parsed()) return cmd_gradcheck(gc_module, gc_seed, gc_instances);
        if (dm->parsed()) return cmd_dump_maps(dm_ckpt, dm_image, dm_out);
    } catch (const lesa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lesa::ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lesa::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const lesa::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const CheckFailure& e) {
        std::cerr << e.message << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
