#include <cinttypes>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "voxnn/gradcheck.hpp"
#include "voxnn/json_io.hpp"
#include "voxnn/train.hpp"

namespace voxnn {
namespace {

struct CommonOpts {
    std::string data;
    std::string out;
    std::string config_path;
    std::string fusion_point = "none";
    std::string fusion_fn;
    bool tiny = false;
    int64_t test_count = 3;
    int64_t test_patches = 128;
    bool save_epoch_ckpts = false;
    int64_t parallel_runs = 1;
    TrainConfig flags;  // flag landing zone; merged over --config by count()
};

void add_arch_options(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--fusion-point", o.fusion_point, "none, early, middle or late")
        ->check(CLI::IsMember({"none", "early", "middle", "late"}));
    sub->add_option("--fusion-fn", o.fusion_fn, "max, sum or conv")
        ->check(CLI::IsMember({"max", "sum", "conv"}));
    sub->add_flag("--tiny", o.tiny, "narrow layer widths, for smoke runs");
}

void add_train_options(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "JSON training settings; explicit flags win");
    sub->add_option("--lr", o.flags.learning_rate, "Adam learning rate");
    sub->add_option("--beta1", o.flags.beta1, "Adam beta1");
    sub->add_option("--beta2", o.flags.beta2, "Adam beta2");
    sub->add_option("--epsilon", o.flags.epsilon, "Adam epsilon");
    sub->add_option("--epochs", o.flags.epochs, "training epochs");
    sub->add_option("--batch-size", o.flags.batch_size, "patches per batch");
    sub->add_option("--lambda1", o.flags.lambda1, "L1 weight penalty");
    sub->add_option("--lambda2", o.flags.lambda2, "L2 weight penalty");
    sub->add_option("--seed", o.flags.seed, "root seed (init, split, sampling, dropout)");
    sub->add_option("--patches-per-epoch", o.flags.patches_per_epoch, "patches sampled per epoch");
    sub->add_option("--tumor-fraction", o.flags.tumor_fraction,
                    "fraction of patches centered on tumor voxels");
    sub->add_option("--test-count", o.test_count, "patients held out for the test split");
    sub->add_option("--test-patches", o.test_patches, "patches sampled from the test split");
}

TrainConfig resolve_train_config(const CLI::App* sub, const CommonOpts& o) {
    TrainConfig cfg;
    if (!o.config_path.empty()) {
        std::ifstream f(o.config_path);
        if (!f) throw ConfigError("cannot open config '" + o.config_path + "'");
        nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
        if (j.is_discarded()) throw ConfigError("malformed JSON in '" + o.config_path + "'");
        train_config_merge_json(cfg, j);
    }
    if (sub->count("--lr")) cfg.learning_rate = o.flags.learning_rate;
    if (sub->count("--beta1")) cfg.beta1 = o.flags.beta1;
    if (sub->count("--beta2")) cfg.beta2 = o.flags.beta2;
    if (sub->count("--epsilon")) cfg.epsilon = o.flags.epsilon;
    if (sub->count("--epochs")) cfg.epochs = o.flags.epochs;
    if (sub->count("--batch-size")) cfg.batch_size = o.flags.batch_size;
    if (sub->count("--lambda1")) cfg.lambda1 = o.flags.lambda1;
    if (sub->count("--lambda2")) cfg.lambda2 = o.flags.lambda2;
    if (sub->count("--seed")) cfg.seed = o.flags.seed;
    if (sub->count("--patches-per-epoch")) cfg.patches_per_epoch = o.flags.patches_per_epoch;
    if (sub->count("--tumor-fraction")) cfg.tumor_fraction = o.flags.tumor_fraction;
    cfg.validate();
    return cfg;
}

ArchitectureSpec arch_from_opts(const CommonOpts& o) {
    ArchitectureSpec s;
    if (o.fusion_point == "none") {
        if (!o.fusion_fn.empty())
            throw ConfigError("--fusion-fn requires --fusion-point early, middle or late");
        s = ArchitectureSpec::baseline();
    } else {
        if (o.fusion_fn.empty())
            throw ConfigError("--fusion-point " + o.fusion_point + " also needs --fusion-fn");
        s = ArchitectureSpec::fused(parse_fusion_point(o.fusion_point),
                                    parse_fusion_fn(o.fusion_fn));
    }
    return o.tiny ? s.with_tiny_channels() : s;
}

std::vector<PatientVolumes> load_patients(const DatasetManifest& m,
                                          const std::vector<std::string>& ids) {
    std::vector<PatientVolumes> v;
    v.reserve(ids.size());
    for (const auto& id : ids) v.push_back(load_patient(m.find(id)));
    return v;
}

void write_run_config(const std::string& run_dir, const std::string& command,
                      const ArchitectureSpec& arch, const TrainConfig& cfg,
                      const CommonOpts& o) {
    nlohmann::json j;
    j["command"] = command;
    j["architecture"] = arch_to_json(arch);
    j["train"] = train_config_to_json(cfg);
    j["data"] = o.data;
    j["test_count"] = o.test_count;
    j["test_patches"] = o.test_patches;
    std::ofstream f(run_dir + "/config.json", std::ios::trunc);
    if (!f) throw DataError("cannot write '" + run_dir + "/config.json'");
    f << j.dump(2) << "\n";
}

struct LoadedData {
    std::vector<PatientVolumes> train_vols;
    std::vector<PatientVolumes> test_vols;
    std::vector<PatchSample> test_patches;
};

LoadedData load_split_data(const CommonOpts& o, const TrainConfig& cfg) {
    const DatasetManifest manifest = load_manifest(o.data);
    auto [train_ids, test_ids] = split_patients(manifest, o.test_count, cfg.seed);
    std::cout << "split: " << train_ids.size() << " train / " << test_ids.size()
              << " test patients\n";
    LoadedData d;
    d.train_vols = load_patients(manifest, train_ids);
    d.test_vols = load_patients(manifest, test_ids);
    Rng rng(Rng::stream(cfg.seed, "test-sample"));
    d.test_patches = sample_patches(d.test_vols, o.test_patches, cfg.tumor_fraction, rng);
    return d;
}

void print_epoch(const EpochRecord& r) {
    std::printf("epoch %3" PRId64 "  loss %.4f  dice %.4f  acc %.4f\n", r.epoch, r.loss, r.dice,
                r.accuracy);
    std::fflush(stdout);
}

int cmd_synth(const CommonOpts& o, const std::vector<int64_t>& shape_args, int64_t patients,
              uint64_t seed) {
    SynthSpec spec;
    spec.n_patients = patients;
    spec.seed = seed;
    if (shape_args.size() == 1)
        spec.shape = Shape{shape_args[0], shape_args[0], shape_args[0]};
    else if (shape_args.size() == 3)
        spec.shape = Shape{shape_args[0], shape_args[1], shape_args[2]};
    else
        throw ConfigError("--shape takes one extent (cubic) or three");
    const DatasetManifest m = generate_synthetic(spec, o.out);
    std::cout << "wrote " << m.patients.size() << " patients (" << m.count(Grade::LGG)
              << " LGG / " << m.count(Grade::HGG) << " HGG), shape " << spec.shape.str()
              << ", manifest " << o.out << "/manifest.jsonl\n";
    return 0;
}

int cmd_params(const CommonOpts& o) {
    const ArchitectureSpec arch = arch_from_opts(o);
    NetworkF net(arch, 0);
    std::printf("%-18s %10s %8s %10s\n", "layer", "weights", "biases", "total");
    for (const auto& row : net.parameter_table())
        std::printf("%-18s %10" PRId64 " %8" PRId64 " %10" PRId64 "\n", row.layer.c_str(),
                    row.weights, row.biases, row.total);
    std::printf("%-18s %10s %8s %10" PRId64 "\n", "total", "", "", net.parameter_count());
    return 0;
}

int cmd_gradcheck(const GradCheckOptions& opts) {
    const std::vector<CheckResult> results = run_gradchecks(opts);
    bool all_pass = true;
    std::printf("%-22s %12s %10s  %s\n", "check", "worst", "tol", "status");
    for (const auto& r : results) {
        std::printf("%-22s %12.3e %10.0e  %s\n", r.name.c_str(), r.worst_rel_err, r.tol,
                    r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) {
        std::cerr << "error: gradient check failed\n";
        return 3;
    }
    return 0;
}

int cmd_train(const CLI::App* sub, const CommonOpts& o) {
    const TrainConfig cfg = resolve_train_config(sub, o);
    const ArchitectureSpec arch = arch_from_opts(o);
    LoadedData d = load_split_data(o, cfg);

    NetworkF net(arch, cfg.seed);
    const std::string run_dir =
        o.out + "/" + arch.variant_name() + "-seed" + std::to_string(cfg.seed);
    std::filesystem::create_directories(run_dir);
    write_run_config(run_dir, "train", arch, cfg, o);
    std::cout << "variant " << arch.variant_name() << ", " << net.parameter_count()
              << " parameters, run dir " << run_dir << "\n";

    SampledPatchSource src(std::move(d.train_vols), cfg.patches_per_epoch, cfg.tumor_fraction,
                           cfg.seed);
    const TrainingLog log =
        train(net, src, d.test_patches, cfg, run_dir, o.save_epoch_ckpts, print_epoch);
    if (log.best_epoch >= 0)
        std::printf("best epoch %" PRId64 "  dice %.4f  acc %.4f\n", log.best_epoch,
                    log.best_dice, log.best_accuracy);
    return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& ckpt, int64_t batch_size,
             bool full_volumes) {
    NetworkF net = checkpoint_load(ckpt);
    TrainConfig cfg;
    cfg.seed = o.flags.seed;
    LoadedData d = load_split_data(o, cfg);

    const EvalReport r = evaluate_patches(net, d.test_patches, batch_size);
    std::printf("patch eval: dice %.4f  acc %.4f over %" PRId64 " voxels\n", r.dice_whole_tumor,
                r.accuracy, r.voxels);
    for (size_t c = 0; c < r.per_class_dice.size(); ++c)
        std::printf("  class %zu dice %.4f\n", c, r.per_class_dice[c]);

    nlohmann::json out_json;
    out_json["variant"] = net.spec().variant_name();
    out_json["parameters"] = net.parameter_count();
    out_json["patches"] = {{"dice", r.dice_whole_tumor},
                           {"accuracy", r.accuracy},
                           {"per_class_dice", r.per_class_dice}};

    if (full_volumes) {
        MetricsAccumulator acc(static_cast<int>(net.spec().classes));
        for (const auto& pv : d.test_vols) acc.add(predict_volume(net, pv, batch_size), pv.labels);
        const EvalReport v = acc.report();
        std::printf("volume eval: dice %.4f  acc %.4f over %" PRId64 " voxels\n",
                    v.dice_whole_tumor, v.accuracy, v.voxels);
        out_json["volumes"] = {{"dice", v.dice_whole_tumor},
                               {"accuracy", v.accuracy},
                               {"per_class_dice", v.per_class_dice}};
    }
    if (!o.out.empty()) {
        std::filesystem::create_directories(o.out);
        std::ofstream f(o.out + "/eval.json", std::ios::trunc);
        if (!f) throw DataError("cannot write '" + o.out + "/eval.json'");
        f << out_json.dump(2) << "\n";
        std::cout << "wrote " << o.out << "/eval.json\n";
    }
    return 0;
}

int cmd_predict(const CommonOpts& o, const std::string& ckpt, const std::string& patient,
                int64_t batch_size) {
    NetworkF net = checkpoint_load(ckpt);
    const DatasetManifest manifest = load_manifest(o.data);
    const PatientVolumes pv = load_patient(manifest.find(patient));
    const LabelVolume pred = predict_volume(net, pv, batch_size);
    store_volume(o.out, pred);
    int64_t tumor = 0;
    for (const uint8_t v : pred.v) tumor += v != 0;
    std::cout << "wrote " << o.out << ".vvol.json (" << pred.shape.str() << ", " << tumor
              << " tumor voxels)\n";
    return 0;
}

struct MatrixRow {
    ArchitectureSpec arch;
    std::string status = "ok";
    double dice = 0;
    double accuracy = 0;
    int64_t params = 0;
    std::optional<double> ratio;
};

int cmd_matrix(const CLI::App* sub, const CommonOpts& o) {
    if (o.fusion_point != "none" || !o.fusion_fn.empty())
        throw ConfigError("matrix trains every variant; drop --fusion-point/--fusion-fn");
    if (o.parallel_runs < 1) throw ConfigError("--parallel-runs must be positive");
    const TrainConfig cfg = resolve_train_config(sub, o);
    LoadedData d = load_split_data(o, cfg);
    std::filesystem::create_directories(o.out);

    std::vector<ArchitectureSpec> specs{ArchitectureSpec::baseline()};
    for (const FusionPoint p : {FusionPoint::early, FusionPoint::middle, FusionPoint::late})
        for (const FusionFn f : {FusionFn::max, FusionFn::sum, FusionFn::conv})
            specs.push_back(ArchitectureSpec::fused(p, f));
    if (o.tiny)
        for (auto& s : specs) s = s.with_tiny_channels();

    std::vector<MatrixRow> rows(specs.size());
    std::exception_ptr fatal;
    auto run_cell = [&](size_t i, bool verbose) {
        MatrixRow& row = rows[i];
        row.arch = specs[i];
        try {
            NetworkF net(specs[i], cfg.seed);
            row.params = net.parameter_count();
            const std::string run_dir =
                o.out + "/" + specs[i].variant_name() + "-seed" + std::to_string(cfg.seed);
            std::filesystem::create_directories(run_dir);
            CommonOpts cell = o;
            cell.fusion_point = specs[i].fusion ? to_string(specs[i].fusion->point) : "none";
            cell.fusion_fn = specs[i].fusion ? to_string(specs[i].fusion->fn) : "";
            write_run_config(run_dir, "matrix", specs[i], cfg, cell);
            SampledPatchSource src(d.train_vols, cfg.patches_per_epoch, cfg.tumor_fraction,
                                   cfg.seed);
            const TrainingLog log =
                train(net, src, d.test_patches, cfg, run_dir, false,
                      verbose ? std::function<void(const EpochRecord&)>(print_epoch) : nullptr);
            row.dice = log.best_dice;
            row.accuracy = log.best_accuracy;
        } catch (const NumericError& e) {
            row.status = "failed";
            std::cerr << "warning: " << specs[i].variant_name() << " halted: " << e.what()
                      << "\n";
        } catch (...) {
            if (!fatal) fatal = std::current_exception();
        }
    };

    for (size_t start = 0; start < specs.size();
         start += static_cast<size_t>(o.parallel_runs)) {
        const size_t stop =
            std::min(specs.size(), start + static_cast<size_t>(o.parallel_runs));
        if (o.parallel_runs == 1) {
            std::cout << "[" << start + 1 << "/" << specs.size() << "] training "
                      << specs[start].variant_name() << "\n";
            run_cell(start, true);
        } else {
            std::vector<std::thread> pool;
            for (size_t i = start; i < stop; ++i) {
                std::cout << "[" << i + 1 << "/" << specs.size() << "] training "
                          << specs[i].variant_name() << "\n";
                pool.emplace_back(run_cell, i, false);
            }
            for (auto& t : pool) t.join();
        }
        if (fatal) std::rethrow_exception(fatal);
    }

    // Parameter-normalized accuracy against the baseline cell.
    if (rows[0].status == "ok" && rows[0].accuracy > 0)
        for (auto& row : rows)
            if (row.status == "ok")
                row.ratio = memory_accuracy_ratio(row.accuracy, static_cast<double>(row.params),
                                                  rows[0].accuracy,
                                                  static_cast<double>(rows[0].params));

    std::string table;
    char line[160];
    std::snprintf(line, sizeof(line), "%-9s %-9s %8s %9s %9s %8s  %s\n", "point", "function",
                  "dice", "accuracy", "params", "ratio", "status");
    table += line;
    nlohmann::json json_rows = nlohmann::json::array();
    for (const auto& row : rows) {
        const std::string point =
            row.arch.fusion ? to_string(row.arch.fusion->point) : "baseline";
        const std::string fn = row.arch.fusion ? to_string(row.arch.fusion->fn) : "-";
        const bool ok = row.status == "ok";
        char dice_s[32] = "-", acc_s[32] = "-", ratio_s[32] = "-";
        if (ok) {
            std::snprintf(dice_s, sizeof(dice_s), "%.4f", row.dice);
            std::snprintf(acc_s, sizeof(acc_s), "%.4f", row.accuracy);
        }
        if (row.ratio) std::snprintf(ratio_s, sizeof(ratio_s), "%.4f", *row.ratio);
        std::snprintf(line, sizeof(line), "%-9s %-9s %8s %9s %9" PRId64 " %8s  %s\n",
                      point.c_str(), fn.c_str(), dice_s, acc_s, row.params, ratio_s,
                      row.status.c_str());
        table += line;

        nlohmann::json jr;
        jr["variant"] = row.arch.variant_name();
        jr["point"] = row.arch.fusion ? nlohmann::json(to_string(row.arch.fusion->point))
                                      : nlohmann::json();
        jr["function"] =
            row.arch.fusion ? nlohmann::json(to_string(row.arch.fusion->fn)) : nlohmann::json();
        jr["dice"] = ok ? nlohmann::json(row.dice) : nlohmann::json();
        jr["accuracy"] = ok ? nlohmann::json(row.accuracy) : nlohmann::json();
        jr["params"] = row.params;
        jr["ratio"] = row.ratio ? nlohmann::json(*row.ratio) : nlohmann::json();
        jr["status"] = row.status;
        json_rows.push_back(std::move(jr));
    }
    std::cout << table;

    nlohmann::json results;
    results["seed"] = cfg.seed;
    results["rows"] = json_rows;
    std::ofstream jf(o.out + "/results.json", std::ios::trunc);
    if (!jf) throw DataError("cannot write '" + o.out + "/results.json'");
    jf << results.dump(2) << "\n";
    std::ofstream tf(o.out + "/results.txt", std::ios::trunc);
    if (!tf) throw DataError("cannot write '" + o.out + "/results.txt'");
    tf << table;
    std::cout << "wrote " << o.out << "/results.json\n";
    return 0;
}

int run(int argc, char** argv) {
    CLI::App app{"volumetric multi-modal brain tumor segmentation experiments"};
    app.require_subcommand(1);
    int exit_code = 0;

    auto synth_o = std::make_shared<CommonOpts>();
    auto synth_shape = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{48});
    auto synth_patients = std::make_shared<int64_t>(12);
    auto synth_seed = std::make_shared<uint64_t>(0);
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
    synth->add_option("--out", synth_o->out, "dataset directory")->required();
    synth->add_option("--patients", *synth_patients, "number of patients");
    synth->add_option("--shape", *synth_shape, "volume extents: one value (cubic) or three")
        ->expected(1, 3);
    synth->add_option("--seed", *synth_seed, "generator seed");
    synth->callback([=, &exit_code] {
        exit_code = cmd_synth(*synth_o, *synth_shape, *synth_patients, *synth_seed);
    });

    auto params_o = std::make_shared<CommonOpts>();
    CLI::App* params = app.add_subcommand("params", "print the per-layer parameter table");
    add_arch_options(params, *params_o);
    params->callback([=, &exit_code] { exit_code = cmd_params(*params_o); });

    auto gc_o = std::make_shared<GradCheckOptions>();
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_option("--filter", gc_o->filter, "substring over check names");
    gc->add_option("--seed", gc_o->seed, "check seed");
    gc->add_flag("--inject-fault", gc_o->inject_fault,
                 "corrupt one analytic gradient per check; the run must fail");
    gc->callback([=, &exit_code] { exit_code = cmd_gradcheck(*gc_o); });

    auto train_o = std::make_shared<CommonOpts>();
    CLI::App* tr = app.add_subcommand("train", "train one variant");
    tr->add_option("--data", train_o->data, "dataset manifest")->required();
    tr->add_option("--out", train_o->out, "directory that receives the run dir")->required();
    tr->add_flag("--save-epoch-checkpoints", train_o->save_epoch_ckpts,
                 "write epoch<k>.ckpt after every epoch");
    add_arch_options(tr, *train_o);
    add_train_options(tr, *train_o);
    tr->callback([=, &exit_code] { exit_code = cmd_train(tr, *train_o); });

    auto eval_o = std::make_shared<CommonOpts>();
    auto eval_ckpt = std::make_shared<std::string>();
    auto eval_batch = std::make_shared<int64_t>(32);
    auto eval_full = std::make_shared<bool>(false);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    ev->add_option("--ckpt", *eval_ckpt, "checkpoint path")->required();
    ev->add_option("--data", eval_o->data, "dataset manifest")->required();
    ev->add_option("--out", eval_o->out, "directory for eval.json (optional)");
    ev->add_option("--seed", eval_o->flags.seed, "split seed (match the training run)");
    ev->add_option("--test-count", eval_o->test_count, "patients held out for the test split");
    ev->add_option("--test-patches", eval_o->test_patches, "patches sampled from the test split");
    ev->add_option("--batch-size", *eval_batch, "inference batch size");
    ev->add_flag("--full-volumes", *eval_full, "also evaluate tiled whole-volume predictions");
    ev->callback([=, &exit_code] {
        exit_code = cmd_eval(*eval_o, *eval_ckpt, *eval_batch, *eval_full);
    });

    auto pred_o = std::make_shared<CommonOpts>();
    auto pred_ckpt = std::make_shared<std::string>();
    auto pred_patient = std::make_shared<std::string>();
    auto pred_batch = std::make_shared<int64_t>(32);
    CLI::App* pr = app.add_subcommand("predict", "write a predicted label volume");
    pr->add_option("--ckpt", *pred_ckpt, "checkpoint path")->required();
    pr->add_option("--data", pred_o->data, "dataset manifest")->required();
    pr->add_option("--patient", *pred_patient, "patient id")->required();
    pr->add_option("--out", pred_o->out, "output volume base path")->required();
    pr->add_option("--batch-size", *pred_batch, "inference batch size");
    pr->callback([=, &exit_code] {
        exit_code = cmd_predict(*pred_o, *pred_ckpt, *pred_patient, *pred_batch);
    });

    auto matrix_o = std::make_shared<CommonOpts>();
    CLI::App* mx = app.add_subcommand("matrix", "train the baseline and all nine fused variants");
    mx->add_option("--data", matrix_o->data, "dataset manifest")->required();
    mx->add_option("--out", matrix_o->out, "results directory")->required();
    mx->add_option("--parallel-runs", matrix_o->parallel_runs, "variants trained concurrently");
    add_arch_options(mx, *matrix_o);
    add_train_options(mx, *matrix_o);
    mx->callback([=, &exit_code] { exit_code = cmd_matrix(mx, *matrix_o); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    return exit_code;
}

}  // namespace
}  // namespace voxnn

int main(int argc, char** argv) {
    try {
        return voxnn::run(argc, argv);
    } catch (const voxnn::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const voxnn::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const voxnn::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const voxnn::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const voxnn::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
