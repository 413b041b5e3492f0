#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chinet/errors.hpp"

namespace chinet {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data))
    {
        if (data_.size() != rows_ * cols_)
            throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                                 " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }

    static Matrix identity(std::size_t n)
    {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows)
    {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
            std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Matrix transpose() const
    {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Matrix& operator*=(double s) noexcept
    {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline bool all_finite(std::span<const double> xs) noexcept
{
    return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs(std::span<const double> xs) noexcept
{
    double m = 0.0;
    for (double v : xs) m = std::max(m, std::abs(v));
    return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept
{
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

/// C = A·B
inline Matrix matmul(const Matrix& a, const Matrix& b)
{
    if (a.cols() != b.rows())
        throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ci = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto bk = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

/// C = A·Bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b)
{
    if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimension mismatch");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
    return c;
}

/// C = Aᵀ·B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b)
{
    if (a.rows() != b.rows()) throw DimensionError("matmul_tn: inner dimension mismatch");
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto ak = a.row(k);
        auto bk = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            auto ci = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

inline Vector matvec(const Matrix& a, std::span<const double> x)
{
    if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
    Vector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
    return y;
}

/// y = Aᵀ·x
inline Vector matvec_t(const Matrix& a, std::span<const double> x)
{
    if (a.rows() != x.size()) throw DimensionError("matvec_t: dimension mismatch");
    Vector y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto ai = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) y[j] += xi * ai[j];
    }
    return y;
}

inline Matrix subtract(const Matrix& a, const Matrix& b)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("subtract: shape mismatch");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
    return c;
}

/// Columns [0, k) of a.
inline Matrix leading_columns(const Matrix& a, std::size_t k)
{
    if (k > a.cols()) throw DimensionError("leading_columns: k exceeds column count");
    Matrix c(a.rows(), k);
    for (std::size_t i = 0; i < a.rows(); ++i)
        std::copy_n(a.row(i).begin(), k, c.row(i).begin());
    return c;
}

/// Third-order tensor f[l][j][k]: bond(in) ⊗ bond(in) -> bond(out).
class Core3 {
public:
    Core3() = default;
    Core3(std::size_t out_dim, std::size_t in_dim)
        : out_(out_dim), in_(in_dim), data_(out_dim * in_dim * in_dim, 0.0) {}
    Core3(std::size_t out_dim, std::size_t in_dim, std::vector<double> data, bool symmetric = false)
        : out_(out_dim), in_(in_dim), data_(std::move(data)), symmetric_(symmetric)
    {
        if (data_.size() != out_ * in_ * in_)
            throw DimensionError("Core3: data length does not match out_dim * in_dim^2");
    }

    /// Reinterprets an out × in² matricisation as a core.
    static Core3 from_matricised(const Matrix& m, std::size_t in_dim, bool symmetric = false)
    {
        if (m.cols() != in_dim * in_dim) throw DimensionError("Core3::from_matricised: cols != in_dim^2");
        return Core3(m.rows(), in_dim, m.storage(), symmetric);
    }

    std::size_t out_dim() const noexcept { return out_; }
    std::size_t in_dim() const noexcept { return in_; }
    bool symmetric() const noexcept { return symmetric_; }

    double& operator()(std::size_t l, std::size_t j, std::size_t k) noexcept { return data_[(l * in_ + j) * in_ + k]; }
    double operator()(std::size_t l, std::size_t j, std::size_t k) const noexcept { return data_[(l * in_ + j) * in_ + k]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    /// Interaction matrix f[l, :, :].
    Matrix slice(std::size_t l) const
    {
        const auto first = data_.begin() + static_cast<std::ptrdiff_t>(l * in_ * in_);
        return Matrix(in_, in_, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(in_ * in_)));
    }

    Matrix matricise() const { return Matrix(out_, in_ * in_, data_); }

    double max_asymmetry() const noexcept
    {
        double m = 0.0;
        for (std::size_t l = 0; l < out_; ++l)
            for (std::size_t j = 0; j < in_; ++j)
                for (std::size_t k = j + 1; k < in_; ++k)
                    m = std::max(m, std::abs((*this)(l, j, k) - (*this)(l, k, j)));
        return m;
    }

    /// Symmetric part ½(f[l,j,k] + f[l,k,j]); the result carries the symmetric flag.
    Core3 symmetrised() const
    {
        Core3 s(out_, in_);
        for (std::size_t l = 0; l < out_; ++l)
            for (std::size_t j = 0; j < in_; ++j) {
                s(l, j, j) = (*this)(l, j, j);
                for (std::size_t k = j + 1; k < in_; ++k) {
                    const double v = 0.5 * ((*this)(l, j, k) + (*this)(l, k, j));
                    s(l, j, k) = v;
                    s(l, k, j) = v;
                }
            }
        s.symmetric_ = true;
        return s;
    }

    /// x_out[l] = Σ_{j,k} f[l,j,k]·x[j]·x[k]
    Vector apply(std::span<const double> x) const
    {
        if (x.size() != in_) throw DimensionError("Core3::apply: input length != in_dim");
        Vector y(out_, 0.0);
        for (std::size_t l = 0; l < out_; ++l) {
            double acc = 0.0;
            for (std::size_t j = 0; j < in_; ++j) {
                if (x[j] == 0.0) continue;
                const double* fj = data_.data() + (l * in_ + j) * in_;
                double inner = 0.0;
                for (std::size_t k = 0; k < in_; ++k) inner += fj[k] * x[k];
                acc += x[j] * inner;
            }
            y[l] = acc;
        }
        return y;
    }

    /// g[l,a,b] = Σ_{j,k} f[l,j,k]·R[j,a]·R[k,b]; R is in_dim × r. Symmetry is preserved.
    Core3 contract_inputs(const Matrix& r) const
    {
        if (r.rows() != in_) throw DimensionError("Core3::contract_inputs: R rows != in_dim");
        const std::size_t nr = r.cols();
        Core3 g(out_, nr);
        Matrix half(in_, nr);
        for (std::size_t l = 0; l < out_; ++l) {
            // half[j,b] = Σ_k f[l,j,k] R[k,b]
            Matrix fl(in_, in_, std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(l * in_ * in_),
                                                    data_.begin() + static_cast<std::ptrdiff_t>((l + 1) * in_ * in_)));
            half = matmul(fl, r);
            Matrix gl = matmul_tn(r, half);
            std::copy(gl.storage().begin(), gl.storage().end(),
                      g.data_.begin() + static_cast<std::ptrdiff_t>(l * nr * nr));
        }
        g.symmetric_ = symmetric_;
        return g;
    }

    /// g[m,j,k] = Σ_l W[m,l]·f[l,j,k]
    Core3 contract_output(const Matrix& w) const
    {
        if (w.cols() != out_) throw DimensionError("Core3::contract_output: W cols != out_dim");
        Matrix g = matmul(w, matricise());
        return from_matricised(g, in_, symmetric_);
    }

    Core3& operator*=(double s) noexcept
    {
        for (double& v : data_) v *= s;
        return *this;
    }

    void set_symmetric_flag(bool s) noexcept { symmetric_ = s; }

    friend bool operator==(const Core3&, const Core3&) = default;

private:
    std::size_t out_ = 0;
    std::size_t in_ = 0;
    std::vector<double> data_;
    bool symmetric_ = false;
};

inline double frobenius(const Matrix& m) noexcept { return norm2(m.data()); }
inline double frobenius(const Core3& c) noexcept { return norm2(c.data()); }

/// Eigenpairs of a symmetric matrix, eigenvalues descending; column i of `vectors` pairs with values[i].
struct Spectrum {
    Vector values;
    Matrix vectors;
};

/// Result of M = R·Q with Q row-orthonormal and R lower-triangular (trapezoidal when rows > cols).
struct RQ {
    Matrix r;
    Matrix q;
};

/// Reduced RQ for any shape: k = min(n, m), R is n×k, Q is k×m with Q·Qᵀ = I_k.
/// Householder reflections applied from the right; diag(R) forced non-negative.
inline RQ rq_thin(const Matrix& m)
{
    if (!all_finite(m.data())) throw NumericalError("rq: input contains non-finite values");
    const std::size_t n = m.rows();
    const std::size_t cols = m.cols();
    const std::size_t k = std::min(n, cols);

    Matrix w = m;
    std::vector<Vector> reflectors(k);
    for (std::size_t r = 0; r < k; ++r) {
        auto row = w.row(r);
        const double nrm = norm2(row.subspan(r));
        if (nrm == 0.0) continue;
        Vector v(row.begin() + static_cast<std::ptrdiff_t>(r), row.end());
        const double alpha = -std::copysign(nrm, v[0]);
        v[0] -= alpha;
        const double vv = dot(v, v);
        if (vv == 0.0) continue;
        for (std::size_t i = r; i < n; ++i) {
            auto wi = w.row(i).subspan(r);
            const double s = 2.0 * dot(wi, v) / vv;
            for (std::size_t j = 0; j < v.size(); ++j) wi[j] -= s * v[j];
        }
        reflectors[r] = std::move(v);
    }

    RQ out{Matrix(n, k), Matrix(k, cols)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= std::min(i, k - 1) && k > 0; ++j) out.r(i, j) = w(i, j);

    for (std::size_t i = 0; i < k; ++i) out.q(i, i) = 1.0;
    for (std::size_t rr = k; rr-- > 0;) {
        const Vector& v = reflectors[rr];
        if (v.empty()) continue;
        const double vv = dot(v, v);
        for (std::size_t i = 0; i < k; ++i) {
            auto qi = out.q.row(i).subspan(rr);
            const double s = 2.0 * dot(qi, v) / vv;
            if (s == 0.0) continue;
            for (std::size_t j = 0; j < v.size(); ++j) qi[j] -= s * v[j];
        }
    }

    for (std::size_t j = 0; j < k; ++j) {
        if (out.r(j, j) >= 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) out.r(i, j) = -out.r(i, j);
        for (double& v : out.q.row(j)) v = -v;
    }
    return out;
}

/// Reduced RQ of an n×m matrix with n ≤ m: R is n×n triangular, Q is n×m with Q·Qᵀ = I.
inline RQ rq_reduced(const Matrix& m)
{
    if (m.rows() > m.cols())
        throw DimensionError("rq_reduced: rows (" + std::to_string(m.rows()) + ") exceed cols (" +
                             std::to_string(m.cols()) + ")");
    return rq_thin(m);
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
inline Spectrum sym_evd(const Matrix& g)
{
    if (g.rows() != g.cols()) throw DimensionError("sym_evd: matrix is not square");
    if (!all_finite(g.data())) throw NumericalError("sym_evd: input contains non-finite values");
    const std::size_t n = g.rows();

    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (g(i, j) + g(j, i));
    Matrix v = Matrix::identity(n);

    const double total = frobenius(a);
    constexpr int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps && total > 0.0; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(2.0 * off) <= 1e-17 * total) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                if (std::abs(apq) <= 1e-20 * total ||
                    (sweep > 3 && std::abs(apq) <= 1e-18 * (std::abs(app) + std::abs(aqq)))) {
                    a(p, q) = a(q, p) = 0.0;
                    continue;
                }
                const double theta = (aqq - app) / (2.0 * apq);
                double t;
                if (std::abs(theta) > 1e150)
                    t = 0.5 / theta;
                else
                    t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (std::size_t r = 0; r < n; ++r) {
                    if (r == p || r == q) continue;
                    const double arp = a(r, p);
                    const double arq = a(r, q);
                    const double np = c * arp - s * arq;
                    const double nq = s * arp + c * arq;
                    a(r, p) = a(p, r) = np;
                    a(r, q) = a(q, r) = nq;
                }
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = a(q, p) = 0.0;

                for (std::size_t r = 0; r < n; ++r) {
                    const double vrp = v(r, p);
                    const double vrq = v(r, q);
                    v(r, p) = c * vrp - s * vrq;
                    v(r, q) = s * vrp + c * vrq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    Spectrum out{Vector(n), Matrix(n, n)};
    for (std::size_t c = 0; c < n; ++c) {
        out.values[c] = a(order[c], order[c]);
        for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
    }
    return out;
}

/// Singular values of an arbitrary matrix (descending), via the smaller Gram matrix.
inline Vector singular_values(const Matrix& m)
{
    const Matrix gram = m.rows() <= m.cols() ? matmul_nt(m, m) : matmul_tn(m, m);
    Spectrum s = sym_evd(gram);
    Vector out(s.values.size());
    std::transform(s.values.begin(), s.values.end(), out.begin(),
                   [](double l) { return std::sqrt(std::max(l, 0.0)); });
    return out;
}

/// Transposed Khatri-Rao product: f[l,j,k] = A[l,j]·B[l,k].
inline Core3 khatri_rao_t(const Matrix& a, const Matrix& b)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("khatri_rao_t: A and B must have identical shape");
    const std::size_t h_out = a.rows();
    const std::size_t h_in = a.cols();
    Core3 f(h_out, h_in);
    for (std::size_t l = 0; l < h_out; ++l)
        for (std::size_t j = 0; j < h_in; ++j)
            for (std::size_t k = 0; k < h_in; ++k) f(l, j, k) = a(l, j) * b(l, k);
    return f;
}

/// One top-down Gram step through a symmetric core whose sibling subtree is isometric:
/// G[a,b] = Σ_{l,l',c} f[l,c,a]·G_next[l,l']·f[l',c,b].
inline Matrix gram_step(const Core3& f, const Matrix& g_next)
{
    if (g_next.rows() != f.out_dim() || g_next.cols() != f.out_dim())
        throw DimensionError("gram_step: G_next must be out_dim x out_dim");
    const double scale = std::max(1.0, max_abs(f.data()));
    if (f.max_asymmetry() > 1e-10 * scale) throw DimensionError("gram_step: core is not symmetric");

    const std::size_t h = f.in_dim();
    const Matrix fm = f.matricise();
    const Matrix gf = matmul(g_next, fm); // [l', (c,b)]
    Matrix g(h, h);
    for (std::size_t l = 0; l < f.out_dim(); ++l) {
        auto fl = fm.row(l);
        auto hl = gf.row(l);
        for (std::size_t c = 0; c < h; ++c) {
            const double* fc = fl.data() + c * h;
            const double* hc = hl.data() + c * h;
            for (std::size_t a = 0; a < h; ++a) {
                const double fa = fc[a];
                if (fa == 0.0) continue;
                auto ga = g.row(a);
                for (std::size_t b = 0; b < h; ++b) ga[b] += fa * hc[b];
            }
        }
    }
    // exact symmetry of the accumulated result
    for (std::size_t a = 0; a < h; ++a)
        for (std::size_t b = a + 1; b < h; ++b) {
            const double s = 0.5 * (g(a, b) + g(b, a));
            g(a, b) = g(b, a) = s;
        }
    return g;
}

} // namespace chinet
