#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "voxnn/model.hpp"

namespace voxnn {

enum class Grade { LGG, HGG };

inline std::string to_string(Grade g) { return g == Grade::LGG ? "LGG" : "HGG"; }

inline Grade parse_grade(std::string_view s) {
    if (s == "LGG") return Grade::LGG;
    if (s == "HGG") return Grade::HGG;
    throw DataError("unknown grade '" + std::string(s) + "' (expected LGG or HGG)");
}

inline constexpr std::array<std::string_view, 4> kModalityNames{"t1", "t1c", "t2", "flair"};

// Volume paths are base paths: `<base>.vvol.json` holds the header and
// `<base>.vvol.bin` the little-endian payload.
struct PatientRecord {
    std::string id;
    Grade grade = Grade::HGG;
    std::array<std::string, 4> modality_paths;
    std::string label_path;
    Shape shape;  // set once volumes are loaded
};

struct DatasetManifest {
    std::vector<PatientRecord> patients;

    int64_t count(Grade g) const {
        int64_t n = 0;
        for (const auto& p : patients) n += p.grade == g;
        return n;
    }

    const PatientRecord& find(std::string_view id) const {
        for (const auto& p : patients)
            if (p.id == id) return p;
        throw DataError("no patient '" + std::string(id) + "' in manifest");
    }
};

// All five volumes of one patient, modalities normalized to [0, 1].
struct PatientVolumes {
    PatientRecord record;
    std::array<TensorF, 4> modalities;
    LabelVolume labels;
};

struct PatchSample {
    TensorF input;      // (4, 25, 25, 25)
    LabelVolume label;  // (9, 9, 9), the center of the input window
    std::array<int64_t, 3> center{};
    std::string patient_id;
};

// --- VVOL volume files ---
void store_volume(const std::string& base, const TensorF& t);
void store_volume(const std::string& base, const LabelVolume& v);
TensorF load_volume_f32(const std::string& base);
LabelVolume load_volume_u8(const std::string& base);

// --- manifest (one structured record per line) ---
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

TensorF normalize_intensity(const TensorF& v);

// Loads and normalizes all five volumes, checking shape agreement and label
// range.
PatientVolumes load_patient(const PatientRecord& rec);

// Grade-stratified random split: test gets round-half-up
// (test_count * n_LGG / n_total) LGG patients and the rest HGG.
std::pair<std::vector<std::string>, std::vector<std::string>> split_patients(
    const DatasetManifest& m, int64_t test_count, uint64_t seed);

std::vector<PatchSample> sample_patches(const std::vector<PatientVolumes>& records,
                                        int64_t count, double tumor_fraction, Rng& rng);

// Per-voxel argmax over the channel axis of (C, D, H, W) logits; ties go to
// the lowest class index.
LabelVolume argmax_classes(const TensorF& logits);

// Tiles non-overlapping 9^3 output windows over the interior; the 8-voxel
// face margin and any remainder strip stay class 0.
LabelVolume predict_volume(NetworkF& net, const PatientVolumes& vols, int64_t batch_size = 8);

struct SynthSpec {
    int64_t n_patients = 12;
    Shape shape{48, 48, 48};
    uint64_t seed = 0;
};

// Ellipsoidal phantom with concentric class shells 1-4; the four modality
// contrasts are chosen so every pair of classes is separated by at least one
// modality but no single modality separates them all.
DatasetManifest generate_synthetic(const SynthSpec& spec, const std::string& out_dir);

// --- checkpoints ---
void checkpoint_save(const NetworkF& net, const std::string& path);
NetworkF checkpoint_load(const std::string& path);

}  // namespace voxnn
