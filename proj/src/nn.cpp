#include "drc/nn.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace drc {

namespace {

// Modified Gram-Schmidt with one re-orthogonalization pass. Columns of a
// [m, n] matrix, m >= n. Gaussian input is well conditioned, and the
// positive-diagonal QR of a Gaussian matrix is exactly Haar.
void mgs_columns(std::vector<double>& a, i64 m, i64 n) {
    for (i64 j = 0; j < n; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (i64 i = 0; i < j; ++i) {
                double dot = 0;
                for (i64 r = 0; r < m; ++r)
                    dot += a[static_cast<size_t>(r * n + i)] * a[static_cast<size_t>(r * n + j)];
                for (i64 r = 0; r < m; ++r)
                    a[static_cast<size_t>(r * n + j)] -= dot * a[static_cast<size_t>(r * n + i)];
            }
        }
        double norm = 0;
        for (i64 r = 0; r < m; ++r) {
            const double v = a[static_cast<size_t>(r * n + j)];
            norm += v * v;
        }
        norm = std::sqrt(norm);
        const double inv = 1.0 / norm;
        for (i64 r = 0; r < m; ++r) a[static_cast<size_t>(r * n + j)] *= inv;
    }
}

}  // namespace

void orthogonal_init(Tensor& w, Rng& rng, double gain) {
    const auto& s = w.shape();
    if (s.empty()) throw ConfigError("orthogonal_init: scalar weight");
    const i64 rows = s[0];
    i64 cols = 1;
    for (size_t i = 1; i < s.size(); ++i) cols *= s[i];

    const i64 m = std::max(rows, cols);
    const i64 n = std::min(rows, cols);
    std::vector<double> a(static_cast<size_t>(m * n));
    for (double& v : a) v = rng.normal();
    mgs_columns(a, m, n);

    double* wd = w.data();
    if (rows <= cols) {
        // orthonormal rows: W = Q^T
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < cols; ++c)
                wd[r * cols + c] = gain * a[static_cast<size_t>(c * n + r)];
    } else {
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < cols; ++c)
                wd[r * cols + c] = gain * a[static_cast<size_t>(r * n + c)];
    }
}

Linear::Linear(i64 in, i64 out, Rng& rng) {
    w = Tensor::zeros({out, in});
    orthogonal_init(w, rng, 1.0);
    w.mark_parameter();
    b = Tensor::zeros({out});
    b.mark_parameter();
}

Conv2d::Conv2d(i64 in_ch, i64 out_ch, i64 kernel, i64 stride_, i64 pad_, Rng& rng) {
    w = Tensor::zeros({out_ch, in_ch, kernel, kernel});
    orthogonal_init(w, rng, 1.0);
    w.mark_parameter();
    b = Tensor::zeros({out_ch});
    b.mark_parameter();
    stride = stride_;
    pad = pad_;
}

Adam::Adam(std::vector<Tensor> params, double lr_, double beta1, double beta2,
           double eps)
    : lr(lr_), params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (!p.has_grad()) continue;
        const double* g = p.grad();
        double* x = p.data();
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        const i64 n = p.numel();
        for (i64 i = 0; i < n; ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

namespace {

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    const u64 n = v.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& v) {
    u64 n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace

void Adam::save(std::ostream& os) const {
    os.write(reinterpret_cast<const char*>(&t_), sizeof(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        write_doubles(os, m_[i]);
        write_doubles(os, v_[i]);
    }
}

void Adam::load(std::istream& is) {
    is.read(reinterpret_cast<char*>(&t_), sizeof(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        read_doubles(is, m_[i]);
        read_doubles(is, v_[i]);
        if (m_[i].size() != static_cast<size_t>(params_[i].numel()))
            throw IoError("Adam::load: state size mismatch");
    }
}

}  // namespace drc
