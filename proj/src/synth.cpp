#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "voxnn/data.hpp"

namespace voxnn {

namespace {

// Class contrasts per modality. Each modality leaves one adjacent class pair
// indistinct (t1: 1/2, t1c: 2/3, t2: 3/4, flair: 0/1), so all four are needed
// to separate all five classes.
constexpr double kContrast[4][5] = {
    {0.15, 0.40, 0.40, 0.65, 0.90},  // t1
    {0.20, 0.45, 0.70, 0.70, 0.95},  // t1c
    {0.85, 0.60, 0.40, 0.15, 0.15},  // t2
    {0.10, 0.10, 0.55, 0.75, 0.95},  // flair
};

constexpr double kNoise = 0.05;
constexpr double kSmallRadius = 0.18;   // fraction of the shortest axis
constexpr double kLargeRadius = 0.30;
constexpr double kGradeRadius = 0.23;   // tumor volume threshold between grades
constexpr double kJitter = 0.15;
// Shell boundaries in normalized ellipsoid distance, inner to outer.
constexpr double kShell[4] = {0.35, 0.60, 0.80, 1.00};

double span(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

}  // namespace

DatasetManifest generate_synthetic(const SynthSpec& spec, const std::string& out_dir) {
    if (spec.n_patients < 1) throw ConfigError("n_patients must be positive");
    if (spec.shape.rank() != 3) throw ConfigError("synthetic shape must be rank 3");
    for (int64_t a = 0; a < 3; ++a)
        if (spec.shape[a] < 25) throw ConfigError("synthetic volumes must be at least 25^3");

    std::filesystem::create_directories(out_dir);
    const int64_t D = spec.shape[0], H = spec.shape[1], W = spec.shape[2];
    const double min_ext = static_cast<double>(std::min({D, H, W}));
    const double grade_vox = 4.0 / 3.0 * M_PI * std::pow(kGradeRadius * min_ext, 3.0);

    DatasetManifest manifest;
    for (int64_t p = 0; p < spec.n_patients; ++p) {
        char id[16];
        std::snprintf(id, sizeof(id), "p%03lld", static_cast<long long>(p));
        Rng rng(Rng::mix(Rng::stream(spec.seed, "synth"), static_cast<uint64_t>(p)));

        const double base_r = (p % 4 == 0 ? kSmallRadius : kLargeRadius) * min_ext;
        std::array<double, 3> radius{}, center{};
        for (auto& r : radius) r = base_r * (1.0 + kJitter * span(rng, -1.0, 1.0));
        const std::array<int64_t, 3> ext{D, H, W};
        for (size_t a = 0; a < 3; ++a)
            center[a] = span(rng, radius[a] + 2.0, static_cast<double>(ext[a]) - radius[a] - 3.0);

        LabelVolume labels(spec.shape);
        int64_t tumor_vox = 0;
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double dz = (static_cast<double>(z) - center[0]) / radius[0];
                    const double dy = (static_cast<double>(y) - center[1]) / radius[1];
                    const double dx = (static_cast<double>(x) - center[2]) / radius[2];
                    const double rho = std::sqrt(dz * dz + dy * dy + dx * dx);
                    uint8_t cls = 0;
                    if (rho <= kShell[0]) cls = 4;
                    else if (rho <= kShell[1]) cls = 3;
                    else if (rho <= kShell[2]) cls = 2;
                    else if (rho <= kShell[3]) cls = 1;
                    labels.at(z, y, x) = cls;
                    tumor_vox += cls != 0;
                }

        PatientRecord rec;
        rec.id = id;
        rec.grade = static_cast<double>(tumor_vox) < grade_vox ? Grade::LGG : Grade::HGG;
        rec.label_path = rec.id + "_labels";
        rec.shape = spec.shape;
        store_volume(out_dir + "/" + rec.label_path, labels);

        for (size_t m = 0; m < 4; ++m) {
            TensorF vol(spec.shape);
            for (int64_t i = 0; i < vol.numel(); ++i) {
                const double v = kContrast[m][labels.v[static_cast<size_t>(i)]] +
                                 kNoise * span(rng, -1.0, 1.0);
                vol[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
            rec.modality_paths[m] = rec.id + "_" + std::string(kModalityNames[m]);
            store_volume(out_dir + "/" + rec.modality_paths[m], vol);
        }
        manifest.patients.push_back(std::move(rec));
    }

    save_manifest(manifest, out_dir + "/manifest.jsonl");
    // Reload so returned records carry resolvable paths and get re-validated.
    return load_manifest(out_dir + "/manifest.jsonl");
}

}  // namespace voxnn
