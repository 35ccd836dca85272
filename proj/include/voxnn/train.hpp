#pragma once

#include <functional>

#include "voxnn/data.hpp"
#include "voxnn/metrics.hpp"
#include "voxnn/optim.hpp"

namespace voxnn {

struct EpochRecord {
    int64_t epoch = 0;
    double loss = 0;  // mean total loss over the epoch's batches
    double l1 = 0;    // mean raw penalties
    double l2 = 0;
    double dice = 0;  // test whole-tumor dice after this epoch
    double accuracy = 0;
};

struct TrainingLog {
    uint64_t seed = 0;
    std::vector<EpochRecord> epochs;
    int64_t best_epoch = -1;
    double best_dice = 0;
    double best_accuracy = 0;
};

// Supplies the patch list for each epoch.
class PatchSource {
public:
    virtual ~PatchSource() = default;
    virtual std::vector<PatchSample> epoch_patches(int64_t epoch) = 0;
};

// The same fixed list every epoch (overfit smoke tests).
class FixedPatchSource : public PatchSource {
public:
    explicit FixedPatchSource(std::vector<PatchSample> patches) : patches_(std::move(patches)) {}
    std::vector<PatchSample> epoch_patches(int64_t) override { return patches_; }

private:
    std::vector<PatchSample> patches_;
};

// Resamples patches_per_epoch tumor-balanced patches each epoch, seeded per
// epoch so the schedule is reproducible.
class SampledPatchSource : public PatchSource {
public:
    SampledPatchSource(std::vector<PatientVolumes> records, int64_t per_epoch,
                       double tumor_fraction, uint64_t seed)
        : records_(std::move(records)), per_epoch_(per_epoch), tumor_fraction_(tumor_fraction),
          seed_(Rng::stream(seed, "sampling")) {}

    std::vector<PatchSample> epoch_patches(int64_t epoch) override {
        Rng rng(Rng::mix(seed_, static_cast<uint64_t>(epoch)));
        return sample_patches(records_, per_epoch_, tumor_fraction_, rng);
    }

private:
    std::vector<PatientVolumes> records_;
    int64_t per_epoch_;
    double tumor_fraction_;
    uint64_t seed_;
};

// Epoch loop: sample, batch, cross-entropy + L1/L2, Adam, then evaluate on
// the fixed test patches. The best-dice parameters are restored into the
// network on return and written to <out_dir>/best.ckpt when out_dir is set.
// A non-finite loss or gradient halts training with the best checkpoint
// saved and the error rethrown.
TrainingLog train(NetworkF& net, PatchSource& train_src,
                  const std::vector<PatchSample>& test_patches, const TrainConfig& cfg,
                  const std::string& out_dir = "", bool save_epoch_checkpoints = false,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// Eval-mode metrics of the network on a patch list.
EvalReport evaluate_patches(NetworkF& net, const std::vector<PatchSample>& patches,
                            int64_t batch_size);

void save_training_log(const TrainingLog& log, const std::string& path);

}  // namespace voxnn
