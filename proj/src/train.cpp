#include "voxnn/train.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "voxnn/json_io.hpp"

namespace voxnn {

namespace {

// Packs patches [start, start+b) into one (b, 4, 25^3) batch tensor.
TensorF pack_batch(const std::vector<PatchSample>& patches, size_t start, int64_t b) {
    const Shape& ps = patches[start].input.shape();
    TensorF batch(Shape{b, ps[0], ps[1], ps[2], ps[3]});
    const int64_t n = patches[start].input.numel();
    for (int64_t i = 0; i < b; ++i) {
        const TensorF& in = patches[start + static_cast<size_t>(i)].input;
        if (in.numel() != n) throw ShapeError("patch " + std::to_string(i) + " shape mismatch");
        std::memcpy(batch.data() + i * n, in.data(), static_cast<size_t>(n) * sizeof(float));
    }
    return batch;
}

}  // namespace

EvalReport evaluate_patches(NetworkF& net, const std::vector<PatchSample>& patches,
                            int64_t batch_size) {
    if (patches.empty()) throw DataError("no patches to evaluate");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    const int64_t nc = net.spec().classes;
    const int64_t outp = net.spec().output_patch;
    const int64_t vox = outp * outp * outp;
    MetricsAccumulator acc(nc);
    for (size_t start = 0; start < patches.size(); start += static_cast<size_t>(batch_size)) {
        const int64_t b =
            std::min<int64_t>(batch_size, static_cast<int64_t>(patches.size() - start));
        TensorF logits = net.forward(pack_batch(patches, start, b), Mode::eval);
        for (int64_t i = 0; i < b; ++i) {
            TensorF sample(Shape{nc, outp, outp, outp});
            std::memcpy(sample.data(), logits.data() + i * nc * vox,
                        static_cast<size_t>(nc * vox) * sizeof(float));
            acc.add(argmax_classes(sample), patches[start + static_cast<size_t>(i)].label);
        }
    }
    return acc.report();
}

TrainingLog train(NetworkF& net, PatchSource& train_src,
                  const std::vector<PatchSample>& test_patches, const TrainConfig& cfg,
                  const std::string& out_dir, bool save_epoch_checkpoints,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    if (test_patches.empty()) throw DataError("empty test patch set");

    AdamState<float> adam(net.params());
    TrainingLog log;
    log.seed = cfg.seed;
    const uint64_t dropout_root = Rng::stream(cfg.seed, "dropout");
    const int64_t nc = net.spec().classes;
    const int64_t outp = net.spec().output_patch;
    const int64_t vox = outp * outp * outp;

    std::ofstream log_file;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log_file.open(out_dir + "/train_log.jsonl", std::ios::trunc);
        if (!log_file) throw DataError("cannot open '" + out_dir + "/train_log.jsonl'");
    }

    std::vector<TensorF> best;
    auto snapshot_best = [&] {
        best.clear();
        for (const auto& p : net.params()) best.push_back(p.value);
    };
    auto restore_best = [&] {
        for (size_t i = 0; i < best.size(); ++i) net.params()[i].value = best[i];
    };

    int64_t step = 0;
    try {
        for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            const std::vector<PatchSample> patches = train_src.epoch_patches(epoch);
            if (patches.empty()) throw DataError("patch source returned no patches");

            double loss_sum = 0, l1_sum = 0, l2_sum = 0;
            int64_t batches = 0;
            for (size_t start = 0; start < patches.size();
                 start += static_cast<size_t>(cfg.batch_size)) {
                const int64_t b = std::min<int64_t>(
                    cfg.batch_size, static_cast<int64_t>(patches.size() - start));
                TensorF logits = net.forward(pack_batch(patches, start, b), Mode::train,
                                             Rng::mix(dropout_root, static_cast<uint64_t>(step)));

                TensorF grad(logits.shape());
                double data_loss = 0;
                for (int64_t i = 0; i < b; ++i) {
                    TensorF sample(Shape{nc, outp, outp, outp});
                    std::memcpy(sample.data(), logits.data() + i * nc * vox,
                                static_cast<size_t>(nc * vox) * sizeof(float));
                    CeResult ce = softmax_cross_entropy(
                        sample, patches[start + static_cast<size_t>(i)].label);
                    data_loss += ce.loss;
                    const float inv_b = 1.0f / static_cast<float>(b);
                    for (int64_t j = 0; j < nc * vox; ++j)
                        grad[i * nc * vox + j] = ce.grad_logits[j] * inv_b;
                }
                data_loss /= static_cast<double>(b);

                net.backward(grad);
                const RegPenalty reg = net.apply_regularization(cfg.lambda1, cfg.lambda2);
                const LossReport rep =
                    LossReport::make(data_loss, reg.l1, reg.l2, cfg.lambda1, cfg.lambda2);
                adam_step(net.params(), adam, cfg);

                loss_sum += rep.total;
                l1_sum += reg.l1;
                l2_sum += reg.l2;
                ++batches;
                ++step;
            }

            const EvalReport ev = evaluate_patches(net, test_patches, cfg.batch_size);
            EpochRecord rec;
            rec.epoch = epoch;
            rec.loss = loss_sum / static_cast<double>(batches);
            rec.l1 = l1_sum / static_cast<double>(batches);
            rec.l2 = l2_sum / static_cast<double>(batches);
            rec.dice = ev.dice_whole_tumor;
            rec.accuracy = ev.accuracy;
            log.epochs.push_back(rec);
            if (log_file) {
                log_file << epoch_to_json(rec).dump() << "\n";
                log_file.flush();
            }
            if (save_epoch_checkpoints && !out_dir.empty())
                checkpoint_save(net, out_dir + "/epoch" + std::to_string(epoch) + ".ckpt");
            if (log.best_epoch < 0 || rec.dice > log.best_dice) {
                log.best_epoch = epoch;
                log.best_dice = rec.dice;
                log.best_accuracy = rec.accuracy;
                snapshot_best();
                if (!out_dir.empty()) checkpoint_save(net, out_dir + "/best.ckpt");
            }
            if (on_epoch) on_epoch(rec);
        }
    } catch (const NumericError&) {
        if (log.best_epoch >= 0) {
            restore_best();
            if (!out_dir.empty()) checkpoint_save(net, out_dir + "/best.ckpt");
        }
        throw;
    }

    if (log.best_epoch >= 0) restore_best();
    return log;
}

void save_training_log(const TrainingLog& log, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    for (const auto& rec : log.epochs) f << epoch_to_json(rec).dump() << "\n";
    if (!f) throw DataError("short write to '" + path + "'");
}

}  // namespace voxnn
