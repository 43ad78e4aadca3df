#include "dubflow/runio.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dubflow::runio {

using numgrad::Tensor;

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, (double)t_);
    double c2 = 1.0 - std::pow(beta2_, (double)t_);
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& val = params_[i].raw_value();
        const auto& g = params_[i].node->grad;
        for (size_t j = 0; j < val.size(); ++j) {
            double grad = g.empty() ? 0.0 : g[j];
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * grad;
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * grad * grad;
            val[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
        }
    }
}

CsvLogger::CsvLogger(const std::string& path, const std::vector<std::string>& header)
    : out_(path) {
    if (!out_) throw std::runtime_error("cannot open log file " + path);
    for (size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
}

void CsvLogger::row(const std::vector<double>& values) {
    out_.precision(10);
    for (size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << values[i];
    out_ << "\n";
}

std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << data;
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    };
    std::vector<std::thread> pool;
    for (int i = 1; i < threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
}

}  // namespace dubflow::runio
