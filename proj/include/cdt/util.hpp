#pragma once

#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cdt/error.hpp"

namespace cdt {

// Dense row-major double matrix for the analysis modules.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
    const double* row(std::size_t i) const { return v.data() + i * cols; }
    double* row(std::size_t i) { return v.data() + i * cols; }
};

// Number of worker threads: CDT_THREADS if set, else hardware concurrency
// capped at 8. Always >= 1.
std::size_t env_threads();

// Runs fn(i) for i in [0, n). Work is chunked across env_threads() workers;
// callers own determinism by writing to disjoint slots. Exceptions from
// workers are rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// Shortest form that round-trips a double exactly.
std::string fmt_double(double x);
// Fixed significant digits, for human-facing tables.
std::string fmt_sig(double x, int digits);

std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, const std::string& content);
void write_binary_file(const std::filesystem::path& p, const std::string& bytes);
std::string read_binary_file(const std::filesystem::path& p);

}  // namespace cdt
