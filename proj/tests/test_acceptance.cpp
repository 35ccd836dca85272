// Acceptance checks, one per criterion; run as `voxnn_acceptance <n|all>`.
// Each criterion prints exactly one PASS/FAIL line.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxnn/data.hpp"
#include "voxnn/fusion.hpp"
#include "voxnn/metrics.hpp"
#include "voxnn/train.hpp"

using namespace voxnn;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cmd(const std::string& cmd) {
    std::cout << "+ " << cmd << std::endl;
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "voxnn_accept" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) return {};
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool same_file(const fs::path& a, const fs::path& b) {
    const auto ba = slurp(a), bb = slurp(b);
    return !ba.empty() && ba == bb;
}

bool same_dir(const fs::path& a, const fs::path& b) {
    size_t na = 0, nb = 0;
    for (const auto& e : fs::directory_iterator(b)) {
        (void)e;
        ++nb;
    }
    for (const auto& e : fs::directory_iterator(a)) {
        ++na;
        if (!e.is_regular_file() || !same_file(e.path(), b / e.path().filename())) return false;
    }
    return na == nb;
}

std::vector<ArchitectureSpec> all_variants() {
    std::vector<ArchitectureSpec> v{ArchitectureSpec::baseline()};
    for (FusionPoint p : {FusionPoint::early, FusionPoint::middle, FusionPoint::late})
        for (FusionFn f : {FusionFn::max, FusionFn::sum, FusionFn::conv})
            v.push_back(ArchitectureSpec::fused(p, f));
    return v;
}

template <typename T>
Tensor<T> rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(s);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(T)) == 0;
}

// --- criterion 1: full gradient-check suite through the CLI, under 5 minutes

bool criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run_cmd(std::string(VOXNN_BIN) + " gradcheck");
    const double secs = seconds_since(t0);
    const bool ok = rc == 0 && secs < 300.0;
    std::printf("criterion 1: %s  gradient checks (exit %d, %.1f s, limit 300 s)\n",
                ok ? "PASS" : "FAIL", rc, secs);
    return ok;
}

// --- criterion 2: shape contract for every full-width variant

bool criterion2() {
    bool ok = true;
    Rng rng(0);
    const TensorF batch = rand_tensor<float>(Shape{1, 4, 25, 25, 25}, rng, 0.0, 1.0);
    const std::vector<Shape> want_blocks{Shape{30, 21, 21, 21}, Shape{40, 17, 17, 17},
                                         Shape{40, 13, 13, 13}, Shape{50, 9, 9, 9}};
    for (const ArchitectureSpec& s : all_variants()) {
        NetworkF net(s, 0);
        ok = ok && net.forward(batch, Mode::eval).shape() == Shape{1, 5, 9, 9, 9};
        const auto blocks = net.block_output_shapes();
        ok = ok && blocks.size() == 4;
        for (size_t b = 0; b < 4; ++b) ok = ok && blocks[b] == want_blocks[b];
        if (s.fusion) {
            const Shape fused_in = net.fusion_input_shape();
            const int64_t e = s.extent_after_block(s.fusion_block());
            ok = ok && fused_in == Shape{4, s.fusion_channels(), e, e, e};
        }
    }
    NetworkF early(ArchitectureSpec::fused(FusionPoint::early, FusionFn::max), 0);
    NetworkF middle(ArchitectureSpec::fused(FusionPoint::middle, FusionFn::max), 0);
    NetworkF late(ArchitectureSpec::fused(FusionPoint::late, FusionFn::max), 0);
    ok = ok && early.fusion_input_shape() == Shape{4, 30, 21, 21, 21};
    ok = ok && middle.fusion_input_shape() == Shape{4, 40, 17, 17, 17};
    ok = ok && late.fusion_input_shape() == Shape{4, 50, 9, 9, 9};
    std::printf("criterion 2: %s  shape contract across all 10 variants\n", ok ? "PASS" : "FAIL");
    return ok;
}

// --- criterion 3: fusion oracles

template <typename T>
bool fusion_oracles(uint64_t seed, double conv_tol) {
    Rng rng(seed);
    bool ok = true;
    const Tensor<T> streams = rand_tensor<T>(Shape{4, 3, 2, 3, 2}, rng);
    const int64_t m = streams.numel() / 4;
    const MaxFused<T> mx = fuse_max(streams);
    const Tensor<T> sm = fuse_sum(streams);
    for (int64_t i = 0; i < m; ++i) {
        T acc = streams[i], best = streams[i];
        for (int64_t s = 1; s < 4; ++s) {
            acc += streams[s * m + i];
            best = std::max(best, streams[s * m + i]);
        }
        ok = ok && sm[i] == acc && mx.out[i] == best;  // bit-exact against the loops
    }
    const Tensor<T> via_conv = fuse_conv(streams, fusion_identity_kernel<T>(4, 3, T(1)));
    for (int64_t i = 0; i < m; ++i)
        ok = ok && std::abs(static_cast<double>(via_conv[i] - sm[i])) <= conv_tol;
    return ok;
}

bool criterion3() {
    bool ok = fusion_oracles<double>(1, 1e-12) && fusion_oracles<float>(2, 1e-6);

    Rng rng(3);
    for (int rep = 0; rep < 100 && ok; ++rep) {
        const int64_t n = 2 + static_cast<int64_t>(rng.index(4));
        const Shape per{1 + static_cast<int64_t>(rng.index(3)), 2, 2,
                        1 + static_cast<int64_t>(rng.index(3))};
        const int64_t m = per.numel();
        TensorD streams = rand_tensor<double>(Shape{n, per[0], per[1], per[2], per[3]}, rng);
        std::vector<int64_t> perm(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
        for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
        TensorD shuffled(streams.shape());
        for (int64_t s = 0; s < n; ++s)
            std::memcpy(shuffled.data() + s * m,
                        streams.data() + perm[static_cast<size_t>(s)] * m,
                        static_cast<size_t>(m) * sizeof(double));
        ok = ok && same_bits(fuse_max(streams).out, fuse_max(shuffled).out);
        const TensorD s1 = fuse_sum(streams), s2 = fuse_sum(shuffled);
        for (int64_t i = 0; i < m; ++i) ok = ok && std::abs(s1[i] - s2[i]) <= 1e-12;
    }
    std::printf("criterion 3: %s  fusion oracles and permutation invariance\n",
                ok ? "PASS" : "FAIL");
    return ok;
}

// --- criterion 4: parameter-count structure and the derived ratio ordering

bool criterion4() {
    bool ok = true;
    std::vector<std::vector<int64_t>> totals(3, std::vector<int64_t>(3));  // [fn][point]
    int64_t base = 0;
    {
        NetworkF net(ArchitectureSpec::baseline(), 0);
        base = net.parameter_count();
    }
    const FusionPoint points[3] = {FusionPoint::early, FusionPoint::middle, FusionPoint::late};
    const FusionFn fns[3] = {FusionFn::max, FusionFn::sum, FusionFn::conv};
    for (int f = 0; f < 3; ++f)
        for (int p = 0; p < 3; ++p) {
            NetworkF net(ArchitectureSpec::fused(points[p], fns[f]), 0);
            totals[static_cast<size_t>(f)][static_cast<size_t>(p)] = net.parameter_count();
        }

    for (int f = 0; f < 3; ++f) {
        ok = ok && base < totals[static_cast<size_t>(f)][0];
        ok = ok && totals[static_cast<size_t>(f)][0] < totals[static_cast<size_t>(f)][1];
        ok = ok && totals[static_cast<size_t>(f)][1] < totals[static_cast<size_t>(f)][2];
    }
    const int64_t chans[3] = {30, 40, 50};
    for (int p = 0; p < 3; ++p) {
        const int64_t delta = 4 * chans[p] * chans[p] + chans[p];
        ok = ok && totals[2][static_cast<size_t>(p)] - totals[1][static_cast<size_t>(p)] == delta;
        ok = ok && totals[0][static_cast<size_t>(p)] == totals[1][static_cast<size_t>(p)];
    }
    // with accuracies pinned, the ratio must fall as the fusion point moves deeper
    for (int f = 0; f < 3; ++f) {
        double prev = 2.0;
        for (int p = 0; p < 3; ++p) {
            const double r = memory_accuracy_ratio(
                0.9, static_cast<double>(totals[static_cast<size_t>(f)][static_cast<size_t>(p)]),
                0.9, static_cast<double>(base));
            ok = ok && r < prev;
            prev = r;
        }
    }
    std::printf("criterion 4: %s  parameter totals and ratio ordering\n", ok ? "PASS" : "FAIL");
    return ok;
}

// --- criterion 5: overfit smoke test on 20 synthetic patches

struct StopEarly {
    int64_t epoch;
};

bool criterion5() {
    const fs::path dir = fresh_dir("c5");
    SynthSpec spec;
    spec.n_patients = 2;
    spec.shape = Shape{40, 40, 40};
    spec.seed = 5;
    const DatasetManifest manifest = generate_synthetic(spec, dir.string());
    std::vector<PatientVolumes> vols;
    for (const auto& rec : manifest.patients) vols.push_back(load_patient(rec));
    Rng rng(Rng::stream(7, "sampling"));
    const std::vector<PatchSample> patches = sample_patches(vols, 20, 0.5, rng);

    NetworkF net(ArchitectureSpec::baseline().with_tiny_channels(), 1);
    FixedPatchSource src(patches);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 5;
    cfg.learning_rate = 3e-3;
    cfg.seed = 1;

    double epoch0_loss = -1.0;
    int64_t reached = -1;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        train(net, src, patches, cfg, "", false, [&](const EpochRecord& r) {
            if (r.epoch == 0) epoch0_loss = r.loss;
            if (r.dice > 0.95) throw StopEarly{r.epoch};
        });
    } catch (const StopEarly& s) {
        reached = s.epoch;
    }
    const double secs = seconds_since(t0);

    const double ln5 = std::log(5.0);
    const bool loss_ok = epoch0_loss > 0 && std::abs(epoch0_loss - ln5) / ln5 <= 0.05;
    const bool ok = loss_ok && reached >= 0 && secs < 180.0;
    std::printf(
        "criterion 5: %s  overfit smoke test (epoch-0 loss %.4f vs ln5 %.4f, dice>0.95 at "
        "epoch %lld, %.1f s, limit 180 s)\n",
        ok ? "PASS" : "FAIL", epoch0_loss, ln5, static_cast<long long>(reached), secs);
    return ok;
}

// --- criterion 6: the full experiment matrix on a 12-patient synthetic set

bool criterion6() {
    const fs::path data = fresh_dir("c6_data"), out = fresh_dir("c6_out");
    int rc = run_cmd(std::string(VOXNN_BIN) + " synth --out " + data.string() +
                     " --patients 12 --shape 48 --seed 0");
    if (rc != 0) {
        std::printf("criterion 6: FAIL  synth exited with %d\n", rc);
        return false;
    }
    const auto t0 = std::chrono::steady_clock::now();
    rc = run_cmd(std::string(VOXNN_BIN) + " matrix --data " + (data / "manifest.jsonl").string() +
                 " --out " + out.string() +
                 " --tiny --epochs 8 --patches-per-epoch 300 --batch-size 10 --lr 2e-3" +
                 " --test-count 3 --test-patches 128 --seed 0");
    const double secs = seconds_since(t0);

    bool ok = rc == 0 && secs < 1800.0;
    double base_dice = -1.0, best_fused = -1.0;
    std::string best_name;
    if (ok) {
        std::ifstream f(out / "results.json");
        nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
        ok = !j.is_discarded() && j.contains("rows") && j["rows"].size() == 10;
        if (ok)
            for (const auto& row : j["rows"]) {
                ok = ok && row.value("status", "") == "ok";
                if (!row.contains("dice") || row["dice"].is_null()) {
                    ok = false;
                    continue;
                }
                const double d = row["dice"].get<double>();
                if (row["variant"] == "baseline") {
                    base_dice = d;
                } else if (d > best_fused) {
                    best_fused = d;
                    best_name = row["variant"].get<std::string>();
                }
            }
        ok = ok && base_dice >= 0 && best_fused >= base_dice;
    }
    std::printf(
        "criterion 6: %s  experiment matrix (exit %d, %.1f s, limit 1800 s; baseline dice "
        "%.4f, best fused %.4f via %s)\n",
        ok ? "PASS" : "FAIL", rc, secs, base_dice, best_fused,
        best_name.empty() ? "-" : best_name.c_str());
    return ok;
}

// --- criterion 7: grade-stratified split counts

bool criterion7() {
    DatasetManifest m;
    for (int i = 0; i < 274; ++i) {
        PatientRecord r;
        r.id = (i % 5 == 0 && i < 270 ? "lgg" : "hgg") + std::to_string(i);
        r.grade = r.id[0] == 'l' ? Grade::LGG : Grade::HGG;
        m.patients.push_back(r);
    }
    bool ok = m.count(Grade::LGG) == 54 && m.count(Grade::HGG) == 220;

    const auto [train_ids, test_ids] = split_patients(m, 50, 7);
    auto lgg_in = [](const std::vector<std::string>& ids) {
        int64_t n = 0;
        for (const auto& id : ids) n += id[0] == 'l';
        return n;
    };
    ok = ok && test_ids.size() == 50 && lgg_in(test_ids) == 10;
    ok = ok && train_ids.size() == 224 && lgg_in(train_ids) == 44;

    const auto repeat = split_patients(m, 50, 7);
    ok = ok && repeat.first == train_ids && repeat.second == test_ids;
    std::printf("criterion 7: %s  54+220 split with test_count 50 gives 10 LGG + 40 HGG\n",
                ok ? "PASS" : "FAIL");
    return ok;
}

// --- criterion 8: metric oracles

bool criterion8() {
    Rng rng(8);
    bool ok = true;
    for (int rep = 0; rep < 200; ++rep) {
        LabelVolume pred(Shape{6, 6, 6}), truth(Shape{6, 6, 6});
        for (auto& v : pred.v) v = static_cast<uint8_t>(rng.index(5));
        for (auto& v : truth.v) v = static_cast<uint8_t>(rng.index(5));
        int64_t p = 0, t = 0, both = 0, correct = 0;
        for (size_t i = 0; i < pred.v.size(); ++i) {
            p += pred.v[i] > 0;
            t += truth.v[i] > 0;
            both += pred.v[i] > 0 && truth.v[i] > 0;
            correct += pred.v[i] == truth.v[i];
        }
        const double want = p + t == 0 ? 1.0 : 2.0 * double(both) / double(p + t);
        ok = ok && dice(pred, truth, whole_tumor_classes()) == want;
        ok = ok && accuracy(pred, truth) == double(correct) / 216.0;
    }
    ok = ok && dice(LabelVolume(Shape{4, 4, 4}), LabelVolume(Shape{4, 4, 4}),
                    whole_tumor_classes()) == 1.0;
    std::printf("criterion 8: %s  dice and accuracy match brute force on 200 volumes\n",
                ok ? "PASS" : "FAIL");
    return ok;
}

// --- criterion 9: bit-identical artifacts under identical flags and seeds

bool criterion9() {
    const fs::path s1 = fresh_dir("c9_s1"), s2 = fresh_dir("c9_s2");
    const std::string synth_flags = " --patients 4 --shape 32 --seed 9";
    bool ok = run_cmd(std::string(VOXNN_BIN) + " synth --out " + s1.string() + synth_flags) == 0;
    ok = ok && run_cmd(std::string(VOXNN_BIN) + " synth --out " + s2.string() + synth_flags) == 0;
    ok = ok && same_dir(s1, s2);

    const fs::path t1 = fresh_dir("c9_t1"), t2 = fresh_dir("c9_t2");
    const std::string train_flags =
        " --data " + (s1 / "manifest.jsonl").string() +
        " --tiny --epochs 2 --patches-per-epoch 30 --batch-size 8 --lr 1e-3" +
        " --test-count 1 --test-patches 16 --seed 3";
    ok = ok && run_cmd(std::string(VOXNN_BIN) + " train --out " + t1.string() + train_flags) == 0;
    ok = ok && run_cmd(std::string(VOXNN_BIN) + " train --out " + t2.string() + train_flags) == 0;
    for (const char* f : {"train_log.jsonl", "best.ckpt", "config.json"})
        ok = ok && same_file(t1 / "baseline-seed3" / f, t2 / "baseline-seed3" / f);

    const fs::path p1 = fresh_dir("c9_p1"), p2 = fresh_dir("c9_p2");
    const std::string predict_flags = " --ckpt " + (t1 / "baseline-seed3" / "best.ckpt").string() +
                                      " --data " + (s1 / "manifest.jsonl").string() +
                                      " --patient p000";
    ok = ok && run_cmd(std::string(VOXNN_BIN) + " predict --out " + (p1 / "pred").string() +
                       predict_flags) == 0;
    ok = ok && run_cmd(std::string(VOXNN_BIN) + " predict --out " + (p2 / "pred").string() +
                       predict_flags) == 0;
    ok = ok && same_file(p1 / "pred.vvol.json", p2 / "pred.vvol.json");
    ok = ok && same_file(p1 / "pred.vvol.bin", p2 / "pred.vvol.bin");

    std::printf("criterion 9: %s  repeated runs produce bit-identical artifacts\n",
                ok ? "PASS" : "FAIL");
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string which = argc > 1 ? argv[1] : "all";
    bool (*checks[])() = {criterion1, criterion2, criterion3, criterion4, criterion5,
                          criterion6, criterion7, criterion8, criterion9};
    int failures = 0;
    if (which == "all") {
        for (auto* c : checks) failures += !c();
    } else {
        const int n = std::atoi(which.c_str());
        if (n < 1 || n > 9) {
            std::cerr << "usage: voxnn_acceptance <1-9|all>\n";
            return 2;
        }
        failures += !checks[n - 1]();
    }
    return failures == 0 ? 0 : 1;
}
