#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "voxalign/errors.hpp"
#include "voxalign/rng.hpp"
#include "voxalign/tensor.hpp"

using namespace voxalign;
using ad::KeyMask;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

Mat random_mat(rng::Stream& s, int r, int c, double scale = 1.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = s.uniform(-scale, scale);
    return m;
}

// Max relative error between analytic and numeric gradients, with an absolute
// floor so near-zero entries do not blow up the ratio.
double grad_gap(const Mat& a, const Mat& n) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        double denom = std::abs(a(i)) + std::abs(n(i)) + 1e-8;
        worst = std::max(worst, std::abs(a(i) - n(i)) / denom);
    }
    return worst;
}

// FD-checks d scalar(build)/d x at x0. build() must consume its leaf argument.
void check_grad(const Mat& x0, const std::function<Var(Tape&, Var)>& build, double tol = 1e-7) {
    Tape t;
    Var x = t.leaf(x0, true);
    Var y = build(t, x);
    REQUIRE(y.val().size() == 1);
    t.backward(y);
    Mat analytic = t.grad(x);
    Mat numeric = ad::finite_difference(
        [&](const Mat& xv) {
            Tape u;
            return build(u, u.leaf(xv, true)).scalar();
        },
        x0);
    CHECK(grad_gap(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("forward values of core ops") {
    Tape t;
    Mat a(2, 2), b(2, 2);
    a << 1, 2, 3, 4;
    b << 5, 6, 7, 8;
    Var va = t.constant(a), vb = t.constant(b);
    CHECK(t.value(t.matmul(va, vb))(0, 0) == doctest::Approx(19));
    CHECK(t.value(t.add(va, vb))(1, 1) == doctest::Approx(12));
    CHECK(t.value(t.sub(va, vb))(0, 1) == doctest::Approx(-4));
    CHECK(t.value(t.hadamard(va, vb))(1, 0) == doctest::Approx(21));
    CHECK(t.value(t.transpose(va))(0, 1) == doctest::Approx(3));
    CHECK(t.value(t.sum(va)).value() == doctest::Approx(10));
    CHECK(t.value(t.mean_all(va)).value() == doctest::Approx(2.5));
    CHECK(t.value(t.diag(va))(1, 0) == doctest::Approx(4));
    CHECK(t.value(t.dot(va, vb)).value() == doctest::Approx(5 + 12 + 21 + 32));
}

TEST_CASE("row_softmax rows sum to one; mask zeroes excluded keys") {
    Tape t;
    Mat a(2, 4);
    a << 1, 2, 3, 4, -1, 0, 1, 2;
    Var y = t.row_softmax(t.constant(a));
    for (int i = 0; i < 2; ++i) CHECK(t.value(y).row(i).sum() == doctest::Approx(1.0));

    KeyMask mask = {1, 0, 1, 0};
    Var ym = t.row_softmax(t.constant(a), &mask);
    const Mat& m = t.value(ym);
    CHECK(m(0, 1) == 0.0);
    CHECK(m(0, 3) == 0.0);
    CHECK(m.row(0).sum() == doctest::Approx(1.0));
    // Equivalent to softmax over the kept columns only.
    double e0 = std::exp(1.0), e2 = std::exp(3.0);
    CHECK(m(0, 0) == doctest::Approx(e0 / (e0 + e2)));

    KeyMask none = {0, 0, 0, 0};
    CHECK_THROWS_AS((void)t.row_softmax(t.constant(a), &none), InvalidArgument);
}

TEST_CASE("layer_norm normalizes rows to zero mean unit variance") {
    Tape t;
    Mat a(2, 5);
    a << 1, 2, 3, 4, 5, -2, 0, 2, 4, 6;
    Var g = t.constant(Mat::Ones(1, 5));
    Var b = t.constant(Mat::Zero(1, 5));
    const Mat& y = t.value(t.layer_norm(t.constant(a), g, b));
    for (int i = 0; i < 2; ++i) {
        CHECK(y.row(i).mean() == doctest::Approx(0.0).epsilon(1e-9));
        double var = (y.row(i).array() - y.row(i).mean()).square().mean();
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("normalize_rows yields unit rows and rejects zero rows") {
    Tape t;
    Mat a(2, 3);
    a << 3, 0, 4, 1, 1, 1;
    const Mat& y = t.value(t.normalize_rows(t.constant(a)));
    CHECK(y.row(0).norm() == doctest::Approx(1.0));
    CHECK(y(0, 0) == doctest::Approx(0.6));
    Mat z = Mat::Zero(1, 3);
    CHECK_THROWS_AS((void)t.normalize_rows(t.constant(z)), DegenerateVector);
}

TEST_CASE("logsumexp_rows is stable for large magnitudes") {
    Tape t;
    Mat a(1, 3);
    a << 1000, 1001, 1002;
    double v = t.value(t.logsumexp_rows(t.constant(a)))(0, 0);
    CHECK(v == doctest::Approx(1002 + std::log(1 + std::exp(-1.0) + std::exp(-2.0))));
}

TEST_CASE("gradients match finite differences per op") {
    rng::Stream s(2024);
    Mat x34 = random_mat(s, 3, 4);
    Mat x33 = random_mat(s, 3, 3);
    Mat x13 = random_mat(s, 1, 3);
    Mat x11 = random_mat(s, 1, 1, 0.5);
    x11(0, 0) += 2.0;  // keep away from zero for div

    SUBCASE("matmul lhs") {
        Mat b0 = random_mat(s, 4, 2);
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.matmul(x, t.constant(b0))); });
    }
    SUBCASE("matmul rhs") {
        Mat a0 = random_mat(s, 2, 3);
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.matmul(t.constant(a0), x)); });
    }
    SUBCASE("add / sub / hadamard") {
        Mat b0 = random_mat(s, 3, 4);
        check_grad(x34, [&](Tape& t, Var x) {
            Var b = t.constant(b0);
            return t.sum(t.hadamard(t.add(x, b), t.sub(x, b)));
        });
    }
    SUBCASE("add_rowvec carrier") {
        Mat r0 = random_mat(s, 1, 4);
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.square(t.add_rowvec(x, t.constant(r0)))); });
    }
    SUBCASE("add_rowvec bias") {
        Mat a0 = random_mat(s, 3, 3);
        check_grad(x13, [&](Tape& t, Var x) { return t.sum(t.square(t.add_rowvec(t.constant(a0), x))); });
    }
    SUBCASE("scale / transpose / square") {
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.square(t.transpose(t.scale(x, -1.7)))); });
    }
    SUBCASE("mul_scalar matrix side") {
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.square(t.mul_scalar(x, t.constant(x11)))); });
    }
    SUBCASE("mul_scalar scalar side") {
        Mat a0 = random_mat(s, 3, 4);
        check_grad(x11, [&](Tape& t, Var x) { return t.sum(t.square(t.mul_scalar(t.constant(a0), x))); });
    }
    SUBCASE("div_scalar both sides") {
        Mat a0 = random_mat(s, 3, 4);
        check_grad(x11, [&](Tape& t, Var x) { return t.sum(t.square(t.div_scalar(t.constant(a0), x))); });
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.square(t.div_scalar(x, t.constant(x11)))); });
    }
    SUBCASE("concat_rows + slice_rows") {
        check_grad(x34, [&](Tape& t, Var x) {
            std::vector<Var> parts = {t.slice_rows(x, 1, 2), t.slice_rows(x, 0, 1)};
            Var c = t.concat_rows(parts);
            return t.sum(t.square(t.slice_rows(c, 0, 3)));
        });
    }
    SUBCASE("concat_cols + slice_cols") {
        check_grad(x34, [&](Tape& t, Var x) {
            std::vector<Var> parts = {t.slice_cols(x, 2, 2), t.slice_cols(x, 0, 2)};
            Var c = t.concat_cols(parts);
            return t.sum(t.square(c));
        });
    }
    SUBCASE("stack_scalars") {
        check_grad(x34, [&](Tape& t, Var x) {
            std::vector<Var> es;
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    es.push_back(t.sum(t.slice_cols(t.slice_rows(x, i, 1), j, 2)));
            return t.sum(t.square(t.stack_scalars(2, 2, es)));
        });
    }
    SUBCASE("row_softmax") {
        Mat r0 = random_mat(s, 1, 4);
        check_grad(x34, [&](Tape& t, Var x) {
            return t.sum(t.hadamard(t.row_softmax(x), t.constant(x34.array().cos().matrix())));
        });
        (void)r0;
    }
    SUBCASE("row_softmax masked") {
        KeyMask mask = {1, 1, 0, 1};
        check_grad(x34, [&](Tape& t, Var x) {
            return t.sum(t.square(t.row_softmax(x, &mask)));
        });
    }
    SUBCASE("layer_norm input") {
        Mat g0 = random_mat(s, 1, 4), b0 = random_mat(s, 1, 4);
        check_grad(x34, [&](Tape& t, Var x) {
            return t.sum(t.square(t.layer_norm(x, t.constant(g0), t.constant(b0))));
        }, 1e-6);
    }
    SUBCASE("layer_norm gamma and beta") {
        Mat a0 = random_mat(s, 3, 3);
        check_grad(x13, [&](Tape& t, Var x) {
            Var beta = t.constant(Mat::Zero(1, 3));
            return t.sum(t.square(t.layer_norm(t.constant(a0), x, beta)));
        });
        check_grad(x13, [&](Tape& t, Var x) {
            Var gamma = t.constant(Mat::Ones(1, 3));
            return t.sum(t.square(t.layer_norm(t.constant(a0), gamma, x)));
        });
    }
    SUBCASE("gelu") {
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.square(t.gelu(x))); });
    }
    SUBCASE("normalize_rows") {
        Mat w0 = random_mat(s, 3, 4);
        check_grad(x34, [&](Tape& t, Var x) {
            return t.sum(t.hadamard(t.normalize_rows(x), t.constant(w0)));
        });
    }
    SUBCASE("logsumexp_rows") {
        check_grad(x34, [&](Tape& t, Var x) { return t.sum(t.square(t.logsumexp_rows(x))); });
    }
    SUBCASE("diag") {
        check_grad(x33, [&](Tape& t, Var x) { return t.sum(t.square(t.diag(x))); });
    }
    SUBCASE("dot") {
        check_grad(x34, [&](Tape& t, Var x) { return t.square(t.dot(x, x)); });
    }
    SUBCASE("mean_all") {
        check_grad(x34, [&](Tape& t, Var x) { return t.square(t.mean_all(x)); });
    }
    SUBCASE("composite attention-like block") {
        Mat wq = random_mat(s, 4, 4), wk = random_mat(s, 4, 4), wv = random_mat(s, 4, 4);
        check_grad(x34, [&](Tape& t, Var x) {
            Var q = t.matmul(x, t.constant(wq));
            Var k = t.matmul(x, t.constant(wk));
            Var v = t.matmul(x, t.constant(wv));
            Var att = t.row_softmax(t.scale(t.matmul(q, t.transpose(k)), 0.5));
            Var out = t.add(t.matmul(att, v), x);
            return t.mean_all(t.square(out));
        }, 1e-6);
    }
}

TEST_CASE("need gating: untracked branches receive no gradient and cost nothing") {
    Tape t;
    Mat a = Mat::Ones(2, 2);
    Var x = t.leaf(a, true);
    Var frozen = t.leaf(a * 3.0, false);
    Var y = t.sum(t.hadamard(x, frozen));
    t.backward(y);
    CHECK(t.grad(x)(0, 0) == doctest::Approx(3.0));
    CHECK_THROWS_AS((void)t.grad(frozen), InvalidArgument);
    CHECK_FALSE(t.has_grad(frozen));
}

TEST_CASE("want_grad promotes an interior node before consumption") {
    Tape t;
    Mat a(1, 3);
    a << 1, 2, 3;
    Var x = t.leaf(a, true);
    Var mid = t.scale(x, 2.0);
    t.want_grad(mid);
    Var y = t.sum(t.square(mid));
    t.backward(y);
    // d/dmid sum(mid^2) = 2*mid
    CHECK(t.grad(mid)(0, 1) == doctest::Approx(8.0));
    CHECK(t.grad(x)(0, 1) == doctest::Approx(16.0));
}

TEST_CASE("backward misuse is rejected") {
    Tape t;
    Var x = t.leaf(Mat::Ones(2, 2), true);
    Var y = t.sum(x);
    t.backward(y);
    CHECK_THROWS_AS(t.backward(y), InvalidArgument);
    CHECK_THROWS_AS((void)t.leaf(Mat::Ones(1, 1)), InvalidArgument);  // record after backward
    t.clear();
    CHECK(t.size() == 0);

    Var c = t.constant(Mat::Ones(1, 1));
    CHECK_THROWS_AS(t.backward(c), InvalidArgument);  // nothing tracked
    Var m = t.leaf(Mat::Ones(2, 2), true);
    CHECK_THROWS_AS(t.backward(m), InvalidArgument);  // non-scalar root
}

TEST_CASE("gradients accumulate across reuse of the same node") {
    Tape t;
    Mat a(1, 2);
    a << 2, 5;
    Var x = t.leaf(a, true);
    Var y = t.sum(t.add(t.hadamard(x, x), x));  // x^2 + x -> dx = 2x + 1
    t.backward(y);
    CHECK(t.grad(x)(0, 0) == doctest::Approx(5.0));
    CHECK(t.grad(x)(0, 1) == doctest::Approx(11.0));
}
