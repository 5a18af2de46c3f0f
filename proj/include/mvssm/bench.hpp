#pragma once

// Wall-clock scaling of a single block forward over the sequence length:
// SecMamba (scan route) against a self-attention block at the same width.
// Reports the median over repetitions and the log-log least-squares slope.

#include <algorithm>
#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "mvssm/blocks.hpp"
#include "mvssm/seqmoe.hpp"

namespace mvssm {

struct BenchRow {
    std::size_t n = 0;
    double secmamba_ms = 0;
    double attention_ms = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    double secmamba_slope = 0;
    double attention_slope = 0;
};

namespace detail {

template <typename F>
double median_ms(F&& fn, int reps) {
    fn();  // warm up
    std::vector<double> times;
    times.reserve(std::size_t(reps));
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

inline double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    const std::size_t n = xs.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lx = std::log(xs[i]), ly = std::log(ys[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

}  // namespace detail

inline BenchReport bench_complexity(const std::vector<std::size_t>& lengths, std::size_t width,
                                    int reps) {
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw std::invalid_argument("bench_complexity: lengths must be ascending");

    using T = float;
    ParamFactory<T> f(99, nullptr);
    auto sm = make_secmamba(f, "bench.sm", width, width, 16);
    auto at = make_attention(f, "bench.at", width, 4);

    BenchReport rep;
    std::mt19937_64 rng(100);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (std::size_t n : lengths) {
        std::vector<T> xv(n * width);
        for (T& v : xv) v = T(dist(rng));
        Tensor<T> x({n, width}, std::move(xv));
        BenchRow row;
        row.n = n;
        row.secmamba_ms = detail::median_ms(
            [&] { return secmamba_forward(x, sm, SsmRoute::Scan).numel(); }, reps);
        row.attention_ms =
            detail::median_ms([&] { return attention_forward(x, at).numel(); }, reps);
        rep.rows.push_back(row);
    }
    std::vector<double> ns, ts, ta;
    for (const auto& r : rep.rows) {
        ns.push_back(double(r.n));
        ts.push_back(r.secmamba_ms);
        ta.push_back(r.attention_ms);
    }
    rep.secmamba_slope = detail::loglog_slope(ns, ts);
    rep.attention_slope = detail::loglog_slope(ns, ta);
    return rep;
}

inline std::string bench_csv(const BenchReport& rep) {
    std::string out = "N,secmamba_ms,attention_ms\n";
    char buf[96];
    for (const auto& r : rep.rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.4f,%.4f\n", r.n, r.secmamba_ms, r.attention_ms);
        out += buf;
    }
    return out;
}

}  // namespace mvssm
