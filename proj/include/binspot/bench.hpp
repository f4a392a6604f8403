#pragma once

#include <binspot/bitkernel.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace binspot {

struct GemmSize {
    std::size_t m = 0;
    std::size_t n = 0;
    std::size_t k = 0;
};

struct BenchRow {
    GemmSize size;
    double float_ns = 0;
    double ref_ns = 0;
    double blocked_ns = 0;

    double speedup_blocked_vs_float() const { return blocked_ns > 0 ? float_ns / blocked_ns : 0.0; }
};

/// Parses "MxNxK" (e.g. "256x4096x256").
inline GemmSize parse_gemm_size(const std::string& text) {
    GemmSize s;
    char tail = 0;
    unsigned long long m = 0, n = 0, k = 0;
    if (std::sscanf(text.c_str(), "%llux%llux%llu%c", &m, &n, &k, &tail) != 3 || m == 0 || n == 0 ||
        k == 0) {
        throw InvalidArgument("bad size '" + text + "', expected MxNxK with positive entries");
    }
    s.m = m;
    s.n = n;
    s.k = k;
    return s;
}

/// Thread cap from BINSPOT_THREADS (unset or invalid means hardware concurrency).
inline std::size_t bench_thread_cap() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("BINSPOT_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return std::min<std::size_t>(hw, v);
    }
    return hw;
}

/// Splits [0, rows) into contiguous chunks, one per thread. Each chunk writes
/// disjoint output rows, so results do not depend on the thread count.
template <class Fn>
void parallel_rows(std::size_t rows, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, rows));
    if (threads == 1) {
        fn(std::size_t{0}, rows);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (rows + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t b = t * chunk;
        const std::size_t e = std::min(rows, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

namespace detail {

inline void float_gemm_rows(const std::vector<float>& a, const std::vector<float>& b, std::size_t n,
                            std::size_t k, std::size_t row_begin, std::size_t row_end,
                            std::vector<float>& out) {
    for (std::size_t i = row_begin; i < row_end; ++i) {
        const float* ar = a.data() + i * n;
        for (std::size_t j = 0; j < k; ++j) {
            const float* br = b.data() + j * n;
            float acc = 0.f;
            for (std::size_t p = 0; p < n; ++p) acc += ar[p] * br[p];
            out[i * k + j] = acc;
        }
    }
}

template <class Fn>
double median_ns(std::size_t repeats, Fn&& fn) {
    std::vector<double> samples;
    samples.reserve(repeats);
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
}

}  // namespace detail

/// Times naive float GEMM, bgemm_reference and bgemm_blocked on ±1 inputs
/// generated from `seed`. Reports median wall time per kernel.
inline std::vector<BenchRow> bench_kernel(const std::vector<GemmSize>& sizes, std::size_t repeats,
                                          std::uint64_t seed = 42, std::size_t threads = 0) {
    detail::require(repeats >= 1, "bench: repeats must be >= 1");
    if (threads == 0) threads = bench_thread_cap();
    std::vector<BenchRow> rows;
    std::mt19937_64 rng(seed);
    for (const auto& s : sizes) {
        detail::require(s.m > 0 && s.n > 0 && s.k > 0, "bench: sizes must be positive");
        std::bernoulli_distribution coin(0.5);
        Tensor sa({s.m, s.n}), sb({s.k, s.n});
        for (auto& v : sa.storage()) v = coin(rng) ? 1.0 : -1.0;
        for (auto& v : sb.storage()) v = coin(rng) ? 1.0 : -1.0;
        std::vector<float> fa(sa.storage().begin(), sa.storage().end());
        std::vector<float> fb(sb.storage().begin(), sb.storage().end());
        const BitTensor pa = pack_signs(sa);
        const BitTensor pb = pack_signs(sb);

        std::vector<float> fout(s.m * s.k);
        IntMatrix out(s.m, s.k);
        const KernelBlocking blk{};

        BenchRow row;
        row.size = s;
        row.float_ns = detail::median_ns(repeats, [&] {
            parallel_rows(s.m, threads, [&](std::size_t b, std::size_t e) {
                detail::float_gemm_rows(fa, fb, s.n, s.k, b, e, fout);
            });
        });
        row.ref_ns = detail::median_ns(repeats, [&] {
            parallel_rows(s.m, threads,
                          [&](std::size_t b, std::size_t e) { detail::bgemm_reference_rows(pa, pb, b, e, out); });
        });
        row.blocked_ns = detail::median_ns(repeats, [&] {
            parallel_rows(s.m, threads, [&](std::size_t b, std::size_t e) {
                detail::bgemm_blocked_rows(pa, pb, blk, b, e, out);
            });
        });
        rows.push_back(row);
    }
    return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
    os << "size_m,size_n,size_k,float_ns,ref_ns,blocked_ns,speedup_blocked_vs_float\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.0f,%.0f,%.0f,%.3f\n", r.size.m, r.size.n, r.size.k,
                      r.float_ns, r.ref_ns, r.blocked_ns, r.speedup_blocked_vs_float());
        os << buf;
    }
}

}  // namespace binspot
