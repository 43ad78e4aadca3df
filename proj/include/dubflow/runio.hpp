#ifndef DUBFLOW_RUNIO_HPP
#define DUBFLOW_RUNIO_HPP

// Run plumbing: optimizer, CSV logging, config hashing, small thread pool.

#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dubflow/tensor.hpp"

namespace dubflow::runio {

class Adam {
public:
    Adam(std::vector<numgrad::Tensor> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8);
    void set_lr(double lr) { lr_ = lr; }
    // applies one update from the gradients currently on the parameters;
    // parameters whose grad is unset this step are treated as zero-gradient
    void step();

private:
    std::vector<numgrad::Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_{0};
};

class CsvLogger {
public:
    CsvLogger(const std::string& path, const std::vector<std::string>& header);
    void row(const std::vector<double>& values);
    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

std::string sha256_hex(const std::string& data);
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& data);

// maps fn over [0, n) using `threads` workers; order of side effects per index
// is the caller's concern, results land at their own index
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

}  // namespace dubflow::runio

#endif
