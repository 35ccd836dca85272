#include <doctest.h>

#include <cstring>

#include "voxnn/conv3d.hpp"
#include "voxnn/gradcheck.hpp"

using namespace voxnn;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape s, Rng& rng) {
    Tensor<T> t(s);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-1.0, 1.0));
    return t;
}

template <typename T>
ConvKernel<T> rand_kernel(int64_t co, int64_t ci, int64_t k, Rng& rng) {
    return ConvKernel<T>(rand_tensor<T>(Shape{co, ci, k, k, k}, rng),
                         rand_tensor<T>(Shape{co}, rng));
}

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(T)) == 0;
}

double dot(const TensorD& a, const TensorD& b) {
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("kernel shape validation") {
    Rng rng(0);
    CHECK_THROWS_AS(ConvKernel<double>(rand_tensor<double>(Shape{2, 1, 3, 3}, rng),
                                       rand_tensor<double>(Shape{2}, rng)),
                    ShapeError);
    CHECK_THROWS_AS(ConvKernel<double>(rand_tensor<double>(Shape{2, 1, 3, 3, 1}, rng),
                                       rand_tensor<double>(Shape{2}, rng)),
                    ShapeError);
    CHECK_THROWS_AS(ConvKernel<double>(rand_tensor<double>(Shape{2, 1, 2, 2, 2}, rng),
                                       rand_tensor<double>(Shape{2}, rng)),
                    ShapeError);
    CHECK_THROWS_AS(ConvKernel<double>(rand_tensor<double>(Shape{2, 1, 3, 3, 3}, rng),
                                       rand_tensor<double>(Shape{3}, rng)),
                    ShapeError);
}

TEST_CASE("zero input yields the bias") {
    Rng rng(1);
    ConvKernel<double> ker = rand_kernel<double>(3, 2, 3, rng);
    TensorD out = conv3d(TensorD(Shape{2, 4, 5, 4}), ker);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 2 * 3 * 2; ++i) CHECK(out[c * 12 + i] == ker.bias[c]);
}

TEST_CASE("all-ones 27-tap sum") {
    ConvKernel<double> ker(TensorD(Shape{1, 1, 3, 3, 3}, 1.0), TensorD(Shape{1}));
    TensorD out = conv3d(TensorD(Shape{1, 3, 3, 3}, 1.0), ker);
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out[0] == 27.0);
}

TEST_CASE("center delta kernel crops the interior") {
    Rng rng(2);
    TensorD w(Shape{1, 1, 3, 3, 3});
    w.at(0, 0, 1, 1, 1) = 1.0;
    ConvKernel<double> ker(std::move(w), TensorD(Shape{1}));
    TensorD in = rand_tensor<double>(Shape{1, 5, 5, 5}, rng);
    TensorD out = conv3d(in, ker);
    CHECK(out.shape() == Shape{1, 3, 3, 3});
    for (int64_t z = 0; z < 3; ++z)
        for (int64_t y = 0; y < 3; ++y)
            for (int64_t x = 0; x < 3; ++x)
                CHECK(out.at(0, z, y, x) == in.at(0, z + 1, y + 1, x + 1));
}

TEST_CASE("backward of the single dot product") {
    Rng rng(3);
    TensorD in = rand_tensor<double>(Shape{1, 3, 3, 3}, rng);
    ConvKernel<double> ker = rand_kernel<double>(1, 1, 3, rng);
    Conv3dGrads<double> g = conv3d_backward(in, ker, TensorD(Shape{1, 1, 1, 1}, 1.0));
    CHECK(std::memcmp(g.weights.data(), in.data(), 27 * sizeof(double)) == 0);
    CHECK(std::memcmp(g.input.data(), ker.weights.data(), 27 * sizeof(double)) == 0);
    CHECK(g.bias[0] == 1.0);
}

TEST_CASE("zero cotangent gives zero gradients") {
    Rng rng(4);
    TensorD in = rand_tensor<double>(Shape{2, 4, 4, 4}, rng);
    ConvKernel<double> ker = rand_kernel<double>(2, 2, 3, rng);
    Conv3dGrads<double> g = conv3d_backward(in, ker, TensorD(Shape{2, 2, 2, 2}));
    for (int64_t i = 0; i < g.input.numel(); ++i) CHECK(g.input[i] == 0.0);
    for (int64_t i = 0; i < g.weights.numel(); ++i) CHECK(g.weights[i] == 0.0);
    for (int64_t i = 0; i < g.bias.numel(); ++i) CHECK(g.bias[i] == 0.0);
}

TEST_CASE("backward matches central finite differences") {
    Rng rng(5);
    const Shape in_shape{2, 4, 5, 4};
    TensorD in = rand_tensor<double>(in_shape, rng);
    ConvKernel<double> ker = rand_kernel<double>(3, 2, 3, rng);
    TensorD cot = rand_tensor<double>(conv3d_output_shape(in_shape, ker), rng);
    Conv3dGrads<double> g = conv3d_backward(in, ker, cot);

    const double h = 1e-5;
    auto fd = [&](TensorD& t, int64_t j) {
        const double keep = t[j];
        t[j] = keep + h;
        const double up = dot(conv3d(in, ker), cot);
        t[j] = keep - h;
        const double dn = dot(conv3d(in, ker), cot);
        t[j] = keep;
        return (up - dn) / (2 * h);
    };

    double worst = 0;
    for (int64_t j = 0; j < in.numel(); ++j)
        worst = std::max(worst, gradcheck_rel_err(g.input[j], fd(in, j)));
    for (int64_t j = 0; j < ker.weights.numel(); ++j)
        worst = std::max(worst, gradcheck_rel_err(g.weights[j], fd(ker.weights, j)));
    for (int64_t j = 0; j < ker.bias.numel(); ++j)
        worst = std::max(worst, gradcheck_rel_err(g.bias[j], fd(ker.bias, j)));
    CHECK(worst < 1e-5);
}

TEST_CASE("optimized path reproduces the reference bit for bit at f64") {
    Rng rng(6);
    const struct {
        int64_t co, ci, k, d, h, w;
    } cases[] = {{3, 2, 3, 5, 6, 4}, {2, 3, 1, 4, 4, 5}, {1, 1, 3, 3, 3, 3}, {4, 2, 3, 7, 5, 6}};
    for (const auto& c : cases) {
        TensorD in = rand_tensor<double>(Shape{c.ci, c.d, c.h, c.w}, rng);
        ConvKernel<double> ker = rand_kernel<double>(c.co, c.ci, c.k, rng);
        TensorD ref = conv3d_ref(in, ker);
        CHECK(same_bits(conv3d(in, ker), ref));

        TensorD cot = rand_tensor<double>(ref.shape(), rng);
        Conv3dGrads<double> a = conv3d_backward(in, ker, cot);
        Conv3dGrads<double> b = conv3d_backward_ref(in, ker, cot);
        CHECK(same_bits(a.input, b.input));
        CHECK(same_bits(a.weights, b.weights));
        CHECK(same_bits(a.bias, b.bias));
    }
}

TEST_CASE("optimized path stays within 1e-6 of the reference at f32") {
    Rng rng(7);
    TensorF in = rand_tensor<float>(Shape{3, 6, 5, 6}, rng);
    ConvKernel<float> ker = rand_kernel<float>(2, 3, 3, rng);
    TensorF fast = conv3d(in, ker);
    TensorF ref = conv3d_ref(in, ker);
    for (int64_t i = 0; i < ref.numel(); ++i) {
        const double denom = std::max(1.0, std::abs(static_cast<double>(ref[i])));
        CHECK(std::abs(static_cast<double>(fast[i] - ref[i])) / denom < 1e-6);
    }
}

TEST_CASE("shape errors name both shapes") {
    Rng rng(8);
    ConvKernel<double> ker = rand_kernel<double>(2, 3, 3, rng);
    TensorD in = rand_tensor<double>(Shape{2, 5, 5, 5}, rng);
    try {
        conv3d(in, ker);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2, 5, 5, 5)") != std::string::npos);
        CHECK(msg.find("(2, 3, 3, 3, 3)") != std::string::npos);
    }

    TensorD ok = rand_tensor<double>(Shape{3, 5, 5, 5}, rng);
    try {
        conv3d_backward(ok, ker, TensorD(Shape{2, 2, 2, 2}, 1.0));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2, 2, 2, 2)") != std::string::npos);
        CHECK(msg.find("(2, 3, 3, 3)") != std::string::npos);
    }
}

TEST_CASE("non-finite input is rejected") {
    Rng rng(9);
    ConvKernel<double> ker = rand_kernel<double>(1, 1, 3, rng);
    TensorD in = rand_tensor<double>(Shape{1, 4, 4, 4}, rng);
    in[5] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(conv3d(in, ker), NumericError);
}
