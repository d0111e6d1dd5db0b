#include "rankcell/common.hpp"
#include "rankcell/kernels.hpp"

#include <doctest.h>
#include <omp.h>

#include <cmath>

using namespace rankcell;
namespace k = rankcell::kernels;

namespace {

template<typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed, 0x6b);
    std::vector<T> v(n);
    for (auto& x : v) {
        x = static_cast<T>(scale * rng.normal());
    }
    return v;
}

std::vector<std::uint8_t> keep_mask(std::size_t batch, std::size_t len) {
    std::vector<std::uint8_t> keep(batch * len, 1);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = len - b % len; i < len; ++i) {
            keep[b * len + i] = 0;
        }
    }
    return keep;
}

// Runs with several threads so the parallel kernels actually split work.
struct Threads {
    int saved = omp_get_max_threads();
    explicit Threads(int n) { omp_set_num_threads(n); }
    ~Threads() { omp_set_num_threads(saved); }
};

}

TEST_CASE_TEMPLATE("matmul variants agree with a naive product and across backends", T, float, double) {
    Threads threads(4);
    const std::size_t m = 37, kk = 29, n = 41;
    const auto a = random_vec<T>(m * kk, 1);
    const auto b = random_vec<T>(kk * n, 2);
    std::vector<T> s(m * n), p(m * n);
    k::serial::matmul<T>(a, b, s, m, kk, n, false);
    k::parallel::matmul<T>(a, b, p, m, kk, n, false);
    CHECK(s == p);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double ref = 0.0;
            for (std::size_t q = 0; q < kk; ++q) {
                ref += static_cast<double>(a[i * kk + q]) * static_cast<double>(b[q * n + j]);
            }
            CHECK(static_cast<double>(s[i * n + j]) == doctest::Approx(ref).epsilon(1e-4));
        }
    }
    k::serial::matmul<T>(a, b, s, m, kk, n, true);
    k::parallel::matmul<T>(a, b, p, m, kk, n, true);
    CHECK(s == p);

    const auto c = random_vec<T>(m * n, 3);
    std::vector<T> sa(kk * n), pa(kk * n);
    k::serial::matmul_at<T>(a, c, sa, m, kk, n, false);
    k::parallel::matmul_at<T>(a, c, pa, m, kk, n, false);
    CHECK(sa == pa);

    const auto d = random_vec<T>(n * kk, 4);
    std::vector<T> sb(m * n), pb(m * n);
    k::serial::matmul_bt<T>(a, d, sb, m, kk, n, false);
    k::parallel::matmul_bt<T>(a, d, pb, m, kk, n, false);
    CHECK(sb == pb);
}

TEST_CASE_TEMPLATE("elementwise and row kernels are bit-identical across backends", T, float, double) {
    Threads threads(3);
    const std::size_t m = 53, n = 24;
    const auto x = random_vec<T>(m * n, 5, 2.0);
    const auto gain = random_vec<T>(n, 6);
    const auto bias = random_vec<T>(n, 7);
    std::vector<T> ys(m * n), yp(m * n), ms(m), mp(m), rs(m), rp(m);
    k::serial::layernorm<T>(x, gain, bias, ys, ms, rs, m, n, T(1e-5));
    k::parallel::layernorm<T>(x, gain, bias, yp, mp, rp, m, n, T(1e-5));
    CHECK(ys == yp);
    CHECK(ms == mp);
    CHECK(rs == rp);

    const auto dy = random_vec<T>(m * n, 8);
    std::vector<T> dxs(m * n), dxp(m * n), dgs(n), dgp(n), dbs(n), dbp(n);
    k::serial::layernorm_backward<T>(dy, x, gain, ms, rs, dxs, dgs, dbs, m, n);
    k::parallel::layernorm_backward<T>(dy, x, gain, mp, rp, dxp, dgp, dbp, m, n);
    CHECK(dxs == dxp);
    CHECK(dgs == dgp);
    CHECK(dbs == dbp);

    std::vector<T> gs(m * n), gp(m * n);
    k::serial::gelu<T>(x, gs);
    k::parallel::gelu<T>(x, gp);
    CHECK(gs == gp);
    k::serial::gelu_backward<T>(x, dy, gs);
    k::parallel::gelu_backward<T>(x, dy, gp);
    CHECK(gs == gp);

    std::vector<T> cs(n, T(0)), cp(n, T(0));
    k::serial::add_column_sums<T>(x, cs, m, n);
    k::parallel::add_column_sums<T>(x, cp, m, n);
    CHECK(cs == cp);

    auto rs2 = x, rp2 = x;
    k::serial::add_row_vector<T>(rs2, bias, m, n);
    k::parallel::add_row_vector<T>(rp2, bias, m, n);
    CHECK(rs2 == rp2);
}

TEST_CASE_TEMPLATE("attention forward and backward are bit-identical across backends", T, float, double) {
    Threads threads(4);
    const std::size_t batch = 5, len = 13, d = 16, heads = 4;
    const auto qkv = random_vec<T>(batch * len * 3 * d, 9);
    const auto keep = keep_mask(batch, len);
    std::vector<T> ps(batch * heads * len * len), pp(ps.size()), cs(batch * len * d), cp(cs.size());
    k::serial::attention<T>(qkv, keep, ps, cs, batch, len, d, heads);
    k::parallel::attention<T>(qkv, keep, pp, cp, batch, len, d, heads);
    CHECK(ps == pp);
    CHECK(cs == cp);

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < len; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    const T pr = ps[((b * heads + h) * len + i) * len + j];
                    if (keep[b * len + j] == 0) {
                        CHECK(pr == T(0));
                    }
                    sum += static_cast<double>(pr);
                }
                CHECK(std::abs(sum - 1.0) < 1e-6);
            }
        }
    }

    const auto dctx = random_vec<T>(cs.size(), 10);
    std::vector<T> ds(qkv.size(), T(0)), dp(qkv.size(), T(0));
    k::serial::attention_backward<T>(qkv, keep, ps, dctx, ds, batch, len, d, heads);
    k::parallel::attention_backward<T>(qkv, keep, pp, dctx, dp, batch, len, d, heads);
    CHECK(ds == dp);
}

TEST_CASE("attention backward matches central differences") {
    const std::size_t batch = 2, len = 5, d = 8, heads = 2;
    auto qkv = random_vec<double>(batch * len * 3 * d, 11, 0.5);
    const auto keep = keep_mask(batch, len);
    const auto w = random_vec<double>(batch * len * d, 12);
    auto objective = [&](const std::vector<double>& in) {
        std::vector<double> probs(batch * heads * len * len), ctx(batch * len * d);
        k::serial::attention<double>(in, keep, probs, ctx, batch, len, d, heads);
        double s = 0.0;
        for (std::size_t i = 0; i < ctx.size(); ++i) {
            s += w[i] * ctx[i];
        }
        return s;
    };
    std::vector<double> probs(batch * heads * len * len), ctx(batch * len * d), grad(qkv.size(), 0.0);
    k::serial::attention<double>(qkv, keep, probs, ctx, batch, len, d, heads);
    k::serial::attention_backward<double>(qkv, keep, probs, w, grad, batch, len, d, heads);
    for (std::size_t i = 0; i < qkv.size(); ++i) {
        const double saved = qkv[i];
        qkv[i] = saved + 1e-5;
        const double up = objective(qkv);
        qkv[i] = saved - 1e-5;
        const double down = objective(qkv);
        qkv[i] = saved;
        CHECK(grad[i] == doctest::Approx((up - down) / 2e-5).epsilon(1e-6).scale(1.0));
    }
}
