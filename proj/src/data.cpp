#include "voxnn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <unordered_set>

#include <json.hpp>

#include "voxnn/json_io.hpp"

static_assert(std::endian::native == std::endian::little,
              "volume and checkpoint payloads are little-endian");

namespace voxnn {

namespace fs = std::filesystem;

namespace {

void write_file(const std::string& path, const void* data, size_t bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw DataError("short write to '" + path + "'");
}

std::vector<char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    f.seekg(0, std::ios::end);
    std::vector<char> buf(static_cast<size_t>(f.tellg()));
    f.seekg(0);
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("short read from '" + path + "'");
    return buf;
}

void write_vvol(const std::string& base, const void* data, size_t bytes, const char* dtype,
                const Shape& shape) {
    nlohmann::json h;
    h["magic"] = "VVOL1";
    h["dtype"] = dtype;
    std::vector<int64_t> ext(static_cast<size_t>(shape.rank()));
    for (int64_t a = 0; a < shape.rank(); ++a) ext[static_cast<size_t>(a)] = shape[a];
    h["shape"] = ext;
    h["order"] = "row-major";
    const std::string hs = h.dump();
    write_file(base + ".vvol.json", hs.data(), hs.size());
    write_file(base + ".vvol.bin", data, bytes);
}

Shape read_vvol_header(const std::string& base, const char* want_dtype) {
    const std::string path = base + ".vvol.json";
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    nlohmann::json h = nlohmann::json::parse(f, nullptr, false);
    if (h.is_discarded()) throw DataError("malformed volume header '" + path + "'");
    if (h.value("magic", "") != std::string("VVOL1"))
        throw DataError("bad magic in '" + path + "' (expected VVOL1)");
    if (h.value("order", "") != std::string("row-major"))
        throw DataError("unsupported element order in '" + path + "'");
    const std::string dtype = h.value("dtype", "");
    if (dtype != want_dtype)
        throw DataError("volume '" + path + "' has dtype '" + dtype + "', expected '" +
                        want_dtype + "'");
    std::vector<int64_t> ext;
    try {
        ext = h.at("shape").get<std::vector<int64_t>>();
    } catch (const nlohmann::json::exception&) {
        throw DataError("missing or malformed shape in '" + path + "'");
    }
    try {
        return Shape(ext);
    } catch (const Error& e) {
        throw DataError("bad shape in '" + path + "': " + e.what());
    }
}

std::vector<char> read_vvol_payload(const std::string& base, int64_t numel, size_t elem_size) {
    const std::string path = base + ".vvol.bin";
    std::vector<char> buf = read_file(path);
    const size_t want = static_cast<size_t>(numel) * elem_size;
    if (buf.size() != want)
        throw DataError("volume '" + path + "' holds " + std::to_string(buf.size()) +
                        " bytes, expected " + std::to_string(want));
    return buf;
}

}  // namespace

void store_volume(const std::string& base, const TensorF& t) {
    write_vvol(base, t.data(), static_cast<size_t>(t.numel()) * sizeof(float), "f32", t.shape());
}

void store_volume(const std::string& base, const LabelVolume& v) {
    write_vvol(base, v.v.data(), v.v.size(), "u8", v.shape);
}

TensorF load_volume_f32(const std::string& base) {
    const Shape shape = read_vvol_header(base, "f32");
    TensorF t(shape);
    std::vector<char> buf = read_vvol_payload(base, t.numel(), sizeof(float));
    std::memcpy(t.data(), buf.data(), buf.size());
    return t;
}

LabelVolume load_volume_u8(const std::string& base) {
    const Shape shape = read_vvol_header(base, "u8");
    if (shape.rank() != 3) throw DataError("label volume '" + base + "' must be rank 3");
    LabelVolume v(shape);
    std::vector<char> buf = read_vvol_payload(base, shape.numel(), 1);
    std::memcpy(v.v.data(), buf.data(), buf.size());
    return v;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    for (const auto& p : m.patients) {
        nlohmann::json j;
        j["id"] = p.id;
        j["grade"] = to_string(p.grade);
        for (size_t m_i = 0; m_i < 4; ++m_i)
            j[std::string(kModalityNames[m_i])] = p.modality_paths[m_i];
        j["labels"] = p.label_path;
        f << j.dump() << "\n";
    }
    if (!f) throw DataError("short write to '" + path + "'");
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    const fs::path dir = fs::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        return fs::path(p).is_absolute() ? p : (dir / p).string();
    };
    DatasetManifest m;
    std::unordered_set<std::string> seen;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw DataError("malformed manifest record at " + path + ":" +
                            std::to_string(lineno));
        PatientRecord rec;
        try {
            rec.id = j.at("id").get<std::string>();
            rec.grade = parse_grade(j.at("grade").get<std::string>());
            for (size_t m_i = 0; m_i < 4; ++m_i)
                rec.modality_paths[m_i] =
                    resolve(j.at(std::string(kModalityNames[m_i])).get<std::string>());
            rec.label_path = resolve(j.at("labels").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad manifest record at " + path + ":" + std::to_string(lineno) +
                            ": " + e.what());
        }
        if (!seen.insert(rec.id).second)
            throw DataError("duplicate patient id '" + rec.id + "' in manifest");
        for (const auto& base : rec.modality_paths)
            if (!fs::exists(base + ".vvol.json"))
                throw DataError("manifest references missing volume '" + base + "'");
        if (!fs::exists(rec.label_path + ".vvol.json"))
            throw DataError("manifest references missing volume '" + rec.label_path + "'");
        m.patients.push_back(std::move(rec));
    }
    if (m.patients.empty()) throw DataError("manifest '" + path + "' has no patients");
    return m;
}

TensorF normalize_intensity(const TensorF& v) {
    if (!v.all_finite()) throw DataError("volume has non-finite intensities");
    float lo = v[0], hi = v[0];
    for (int64_t i = 1; i < v.numel(); ++i) {
        lo = std::min(lo, v[i]);
        hi = std::max(hi, v[i]);
    }
    TensorF out(v.shape());
    if (hi == lo) return out;
    const float scale = 1.0f / (hi - lo);
    for (int64_t i = 0; i < v.numel(); ++i) out[i] = (v[i] - lo) * scale;
    return out;
}

PatientVolumes load_patient(const PatientRecord& rec) {
    PatientVolumes pv;
    pv.record = rec;
    for (size_t m = 0; m < 4; ++m) {
        TensorF raw = load_volume_f32(rec.modality_paths[m]);
        if (raw.shape().rank() != 3)
            throw DataError("volume '" + rec.modality_paths[m] + "' must be rank 3");
        if (m > 0 && !(raw.shape() == pv.modalities[0].shape()))
            throw DataError("patient '" + rec.id + "': modality '" +
                            std::string(kModalityNames[m]) + "' shape " + raw.shape().str() +
                            " differs from t1 shape " + pv.modalities[0].shape().str());
        pv.modalities[m] = normalize_intensity(raw);
    }
    pv.labels = load_volume_u8(rec.label_path);
    if (!(pv.labels.shape == pv.modalities[0].shape()))
        throw DataError("patient '" + rec.id + "': label shape " + pv.labels.shape.str() +
                        " differs from modality shape " + pv.modalities[0].shape().str());
    for (uint8_t c : pv.labels.v)
        if (c > 4)
            throw DataError("patient '" + rec.id + "': label " + std::to_string(int(c)) +
                            " outside classes 0..4");
    pv.record.shape = pv.labels.shape;
    return pv;
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_patients(
    const DatasetManifest& m, int64_t test_count, uint64_t seed) {
    const int64_t n_total = static_cast<int64_t>(m.patients.size());
    std::vector<std::string> lgg, hgg;
    for (const auto& p : m.patients)
        (p.grade == Grade::LGG ? lgg : hgg).push_back(p.id);
    if (lgg.empty() || hgg.empty())
        throw DataError("split requires patients of both grades");
    if (test_count < 0 || test_count >= n_total)
        throw DataError("test_count " + std::to_string(test_count) +
                        " outside [0, " + std::to_string(n_total) + ")");

    const int64_t n_lgg = static_cast<int64_t>(lgg.size());
    const int64_t quota_lgg = static_cast<int64_t>(std::floor(
        static_cast<double>(test_count) * static_cast<double>(n_lgg) /
            static_cast<double>(n_total) +
        0.5));
    const int64_t quota_hgg = test_count - quota_lgg;
    if (quota_lgg > n_lgg)
        throw DataError("test split needs " + std::to_string(quota_lgg) + " LGG patients, have " +
                        std::to_string(n_lgg));
    if (quota_hgg > static_cast<int64_t>(hgg.size()))
        throw DataError("test split needs " + std::to_string(quota_hgg) + " HGG patients, have " +
                        std::to_string(hgg.size()));

    Rng rng(Rng::stream(seed, "split"));
    auto shuffle = [&rng](std::vector<std::string>& v) {
        for (size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[rng.index(static_cast<int64_t>(i))]);
    };
    shuffle(lgg);
    shuffle(hgg);

    std::unordered_set<std::string> test_ids;
    for (int64_t i = 0; i < quota_lgg; ++i) test_ids.insert(lgg[static_cast<size_t>(i)]);
    for (int64_t i = 0; i < quota_hgg; ++i) test_ids.insert(hgg[static_cast<size_t>(i)]);

    std::vector<std::string> train, test;
    for (const auto& p : m.patients)
        (test_ids.count(p.id) ? test : train).push_back(p.id);
    return {std::move(train), std::move(test)};
}

namespace {

// Copies the (25, 25, 25) window centered at c from each modality into one
// (4, 25, 25, 25) patch, plus the central (9, 9, 9) label window.
PatchSample extract_patch(const PatientVolumes& pv, std::array<int64_t, 3> c) {
    const Shape& vs = pv.labels.shape;
    PatchSample s;
    s.center = c;
    s.patient_id = pv.record.id;
    s.input = TensorF(Shape{4, 25, 25, 25});
    for (int64_t m = 0; m < 4; ++m) {
        const TensorF& vol = pv.modalities[static_cast<size_t>(m)];
        for (int64_t z = 0; z < 25; ++z)
            for (int64_t y = 0; y < 25; ++y) {
                const float* src =
                    vol.data() + ((c[0] - 12 + z) * vs[1] + (c[1] - 12 + y)) * vs[2] + c[2] - 12;
                float* dst = s.input.data() + ((m * 25 + z) * 25 + y) * 25;
                std::memcpy(dst, src, 25 * sizeof(float));
            }
    }
    s.label = LabelVolume(Shape{9, 9, 9});
    for (int64_t z = 0; z < 9; ++z)
        for (int64_t y = 0; y < 9; ++y)
            for (int64_t x = 0; x < 9; ++x)
                s.label.at(z, y, x) = pv.labels.at(c[0] - 4 + z, c[1] - 4 + y, c[2] - 4 + x);
    return s;
}

}  // namespace

std::vector<PatchSample> sample_patches(const std::vector<PatientVolumes>& records,
                                        int64_t count, double tumor_fraction, Rng& rng) {
    if (records.empty()) throw DataError("no patients to sample patches from");
    if (count < 0) throw ConfigError("patch count must be non-negative");
    if (!(tumor_fraction >= 0.0 && tumor_fraction <= 1.0))
        throw ConfigError("tumor_fraction must lie in [0, 1]");

    // Tumor centers restricted to positions whose full 25^3 window fits.
    std::vector<std::vector<int64_t>> tumor_centers(records.size());
    for (size_t r = 0; r < records.size(); ++r) {
        const Shape& s = records[r].labels.shape;
        for (int64_t a = 0; a < 3; ++a)
            if (s[a] < 25)
                throw DataError("patient '" + records[r].record.id + "' volume " + s.str() +
                                " is smaller than a 25^3 patch");
        const LabelVolume& lab = records[r].labels;
        for (int64_t z = 12; z <= s[0] - 13; ++z)
            for (int64_t y = 12; y <= s[1] - 13; ++y)
                for (int64_t x = 12; x <= s[2] - 13; ++x)
                    if (lab.at(z, y, x) != 0)
                        tumor_centers[r].push_back((z * s[1] + y) * s[2] + x);
        if (tumor_centers[r].empty())
            std::cerr << "warning: patient '" << records[r].record.id
                      << "' has no tumor voxels in the valid center window; "
                         "tumor draws fall back to background\n";
    }

    std::vector<PatchSample> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        const size_t r = static_cast<size_t>(rng.index(static_cast<int64_t>(records.size())));
        const bool want_tumor = rng.bernoulli(tumor_fraction);
        const Shape& s = records[r].labels.shape;
        std::array<int64_t, 3> c{};
        if (want_tumor && !tumor_centers[r].empty()) {
            const int64_t flat = tumor_centers[r][static_cast<size_t>(
                rng.index(static_cast<int64_t>(tumor_centers[r].size())))];
            c = {flat / (s[1] * s[2]), (flat / s[2]) % s[1], flat % s[2]};
        } else {
            for (int64_t a = 0; a < 3; ++a) c[static_cast<size_t>(a)] = 12 + rng.index(s[a] - 24);
        }
        out.push_back(extract_patch(records[r], c));
    }
    return out;
}

LabelVolume argmax_classes(const TensorF& logits) {
    if (logits.shape().rank() != 4) throw ShapeError("argmax expects (C, D, H, W) logits");
    const int64_t nc = logits.shape()[0];
    const Shape out_shape{logits.shape()[1], logits.shape()[2], logits.shape()[3]};
    const int64_t vox = out_shape.numel();
    LabelVolume out(out_shape);
    for (int64_t v = 0; v < vox; ++v) {
        int64_t best = 0;
        float best_val = logits[v];
        for (int64_t c = 1; c < nc; ++c) {
            const float val = logits[c * vox + v];
            if (val > best_val) {
                best_val = val;
                best = c;
            }
        }
        out.v[static_cast<size_t>(v)] = static_cast<uint8_t>(best);
    }
    return out;
}

LabelVolume predict_volume(NetworkF& net, const PatientVolumes& vols, int64_t batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    const ArchitectureSpec& spec = net.spec();
    const Shape& s = vols.labels.shape;
    const int64_t in = spec.input_patch, outp = spec.output_patch;
    const int64_t half = in / 2;
    for (int64_t a = 0; a < 3; ++a)
        if (s[a] < in)
            throw DataError("volume " + s.str() + " is smaller than a " + std::to_string(in) +
                            "^3 patch");

    std::vector<std::array<int64_t, 3>> centers;
    std::array<std::vector<int64_t>, 3> axis;
    for (int64_t a = 0; a < 3; ++a)
        for (int64_t c = half; c <= s[a] - half - 1; c += outp)
            axis[static_cast<size_t>(a)].push_back(c);
    for (int64_t cz : axis[0])
        for (int64_t cy : axis[1])
            for (int64_t cx : axis[2]) centers.push_back({cz, cy, cx});

    LabelVolume out(s);
    const int64_t vox = outp * outp * outp;
    for (size_t start = 0; start < centers.size(); start += static_cast<size_t>(batch_size)) {
        const int64_t b =
            std::min<int64_t>(batch_size, static_cast<int64_t>(centers.size() - start));
        TensorF batch(Shape{b, spec.modalities, in, in, in});
        for (int64_t i = 0; i < b; ++i) {
            PatchSample p = extract_patch(vols, centers[start + static_cast<size_t>(i)]);
            std::memcpy(batch.data() + i * p.input.numel(), p.input.data(),
                        static_cast<size_t>(p.input.numel()) * sizeof(float));
        }
        TensorF logits = net.forward(batch, Mode::eval);
        for (int64_t i = 0; i < b; ++i) {
            TensorF sample(Shape{spec.classes, outp, outp, outp});
            std::memcpy(sample.data(), logits.data() + i * spec.classes * vox,
                        static_cast<size_t>(spec.classes * vox) * sizeof(float));
            const LabelVolume pred = argmax_classes(sample);
            const auto& c = centers[start + static_cast<size_t>(i)];
            for (int64_t z = 0; z < outp; ++z)
                for (int64_t y = 0; y < outp; ++y)
                    for (int64_t x = 0; x < outp; ++x)
                        out.at(c[0] - outp / 2 + z, c[1] - outp / 2 + y, c[2] - outp / 2 + x) =
                            pred.at(z, y, x);
        }
    }
    return out;
}

void checkpoint_save(const NetworkF& net, const std::string& path) {
    nlohmann::json h;
    h["arch"] = arch_to_json(net.spec());
    h["dtype"] = "f32";
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& p : net.params()) {
        std::vector<int64_t> ext(static_cast<size_t>(p.value.shape().rank()));
        for (int64_t a = 0; a < p.value.shape().rank(); ++a)
            ext[static_cast<size_t>(a)] = p.value.shape()[a];
        tensors.push_back({{"name", p.name}, {"shape", ext}});
    }
    h["tensors"] = tensors;
    const std::string hs = h.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write("VOXCKPT1", 8);
    const uint64_t len = hs.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : net.params())
        f.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.numel()) * sizeof(float));
    if (!f) throw DataError("short write to '" + path + "'");
}

NetworkF checkpoint_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, "VOXCKPT1", 8) != 0)
        throw DataError("'" + path + "' is not a checkpoint (bad magic)");
    uint64_t len = 0;
    if (!f.read(reinterpret_cast<char*>(&len), sizeof(len)))
        throw DataError("truncated checkpoint '" + path + "'");
    if (len > (uint64_t(1) << 30)) throw DataError("implausible header length in '" + path + "'");
    std::string hs(len, '\0');
    if (!f.read(hs.data(), static_cast<std::streamsize>(len)))
        throw DataError("truncated checkpoint header in '" + path + "'");
    nlohmann::json h = nlohmann::json::parse(hs, nullptr, false);
    if (h.is_discarded()) throw DataError("malformed checkpoint header in '" + path + "'");
    if (h.value("dtype", "") != std::string("f32"))
        throw DataError("checkpoint '" + path + "' has unsupported dtype");

    NetworkF net(arch_from_json(h.at("arch")), 0);
    const auto& tensors = h.at("tensors");
    if (!tensors.is_array() || tensors.size() != net.params().size())
        throw DataError("checkpoint '" + path + "' lists " + std::to_string(tensors.size()) +
                        " tensors, network has " + std::to_string(net.params().size()));
    for (size_t i = 0; i < net.params().size(); ++i) {
        auto& p = net.params()[i];
        std::string name;
        std::vector<int64_t> ext;
        try {
            name = tensors[i].at("name").get<std::string>();
            ext = tensors[i].at("shape").get<std::vector<int64_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad tensor record in '" + path + "': " + e.what());
        }
        std::vector<int64_t> want(static_cast<size_t>(p.value.shape().rank()));
        for (int64_t a = 0; a < p.value.shape().rank(); ++a)
            want[static_cast<size_t>(a)] = p.value.shape()[a];
        if (name != p.name || ext != want)
            throw DataError("checkpoint tensor '" + name + "' does not match network parameter '" +
                            p.name + "' " + p.value.shape().str());
        if (!f.read(reinterpret_cast<char*>(p.value.data()),
                    static_cast<std::streamsize>(p.value.numel()) * sizeof(float)))
            throw DataError("truncated tensor data for '" + name + "' in '" + path + "'");
    }
    char extra;
    if (f.read(&extra, 1)) throw DataError("trailing bytes after tensor data in '" + path + "'");
    return net;
}

}  // namespace voxnn
