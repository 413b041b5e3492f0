#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "chinet/errors.hpp"
#include "chinet/linalg.hpp"

namespace chinet {

/// Bilinear layer in training form: f[l,j,k] = A[l,j]·B[l,k].
struct FactoredCore {
    Matrix a;
    Matrix b;

    std::size_t out_dim() const noexcept { return a.rows(); }
    std::size_t in_dim() const noexcept { return a.cols(); }

    friend bool operator==(const FactoredCore&, const FactoredCore&) = default;
};

using Core = std::variant<FactoredCore, Core3>;

inline std::size_t core_out_dim(const Core& c)
{
    return std::visit([](const auto& v) { return v.out_dim(); }, c);
}

inline std::size_t core_in_dim(const Core& c)
{
    return std::visit([](const auto& v) { return v.in_dim(); }, c);
}

inline Core3 to_dense(const FactoredCore& c) { return khatri_rao_t(c.a, c.b); }

inline Core3 to_dense(const Core& c)
{
    if (const auto* f = std::get_if<FactoredCore>(&c)) return to_dense(*f);
    return std::get<Core3>(c);
}

/// Bilinear evaluation of one layer: (A x) ⊙ (B x) for factored cores, Σ f[l,j,k] x_j x_k for dense ones.
inline Vector apply_core(const Core& c, std::span<const double> x)
{
    if (const auto* f = std::get_if<FactoredCore>(&c)) {
        Vector p = matvec(f->a, x);
        const Vector q = matvec(f->b, x);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] *= q[i];
        return p;
    }
    return std::get<Core3>(c).apply(x);
}

/// A χ-net: embedding e (h_1 × (d_in+1)) on the bias-augmented input, L bilinear cores, unembedding u.
class ChiNet {
public:
    ChiNet() = default;
    ChiNet(Matrix embedding, std::vector<Core> cores, Matrix unembedding)
        : embedding_(std::move(embedding)), cores_(std::move(cores)), unembedding_(std::move(unembedding))
    {
        validate();
    }

    const Matrix& embedding() const noexcept { return embedding_; }
    const std::vector<Core>& cores() const noexcept { return cores_; }
    const Core& core(std::size_t i) const { return cores_.at(i); }
    const Matrix& unembedding() const noexcept { return unembedding_; }

    std::size_t depth() const noexcept { return cores_.size(); }
    std::size_t input_dim() const noexcept { return embedding_.cols() - 1; }
    std::size_t num_classes() const noexcept { return unembedding_.rows(); }

    /// Dimension of bond i, 1-based: bond 1 is the embedding output, bond L+1 feeds the unembedding.
    std::size_t bond_dim(std::size_t i) const
    {
        if (i == 0 || i > depth() + 1) throw DimensionError("bond index out of range: " + std::to_string(i));
        return i == 1 ? embedding_.rows() : core_out_dim(cores_[i - 2]);
    }

    std::vector<std::size_t> bond_dims() const
    {
        std::vector<std::size_t> d;
        for (std::size_t i = 1; i <= depth() + 1; ++i) d.push_back(bond_dim(i));
        return d;
    }

    bool all_dense_symmetric() const
    {
        for (const Core& c : cores_) {
            const auto* d = std::get_if<Core3>(&c);
            if (d == nullptr || !d->symmetric()) return false;
        }
        return true;
    }

    friend bool operator==(const ChiNet&, const ChiNet&) = default;

private:
    void validate() const
    {
        if (embedding_.cols() == 0) throw DimensionError("ChiNet: embedding needs at least the bias column");
        std::size_t h = embedding_.rows();
        for (std::size_t i = 0; i < cores_.size(); ++i) {
            const Core& c = cores_[i];
            if (const auto* f = std::get_if<FactoredCore>(&c)) {
                if (f->a.rows() != f->b.rows() || f->a.cols() != f->b.cols())
                    throw DimensionError("ChiNet: core " + std::to_string(i + 1) + " has mismatched A/B shapes");
            }
            if (core_in_dim(c) != h)
                throw DimensionError("ChiNet: core " + std::to_string(i + 1) + " in_dim " +
                                     std::to_string(core_in_dim(c)) + " != bond dim " + std::to_string(h));
            h = core_out_dim(c);
        }
        if (unembedding_.cols() != h)
            throw DimensionError("ChiNet: unembedding cols " + std::to_string(unembedding_.cols()) +
                                 " != last bond dim " + std::to_string(h));
    }

    Matrix embedding_;
    std::vector<Core> cores_;
    Matrix unembedding_;
};

/// (1, x_1, …, x_d)
inline Vector augment(std::span<const double> x)
{
    Vector out;
    out.reserve(x.size() + 1);
    out.push_back(1.0);
    out.insert(out.end(), x.begin(), x.end());
    return out;
}

/// Bond activations x_1 … x_{L+1} for a raw input x.
inline std::vector<Vector> latents(const ChiNet& net, std::span<const double> x)
{
    if (x.size() != net.input_dim())
        throw DimensionError("forward: input length " + std::to_string(x.size()) + " != " +
                             std::to_string(net.input_dim()));
    std::vector<Vector> out;
    out.reserve(net.depth() + 1);
    out.push_back(matvec(net.embedding(), augment(x)));
    for (const Core& c : net.cores()) out.push_back(apply_core(c, out.back()));
    return out;
}

inline Vector forward(const ChiNet& net, std::span<const double> x)
{
    return matvec(net.unembedding(), latents(net, x).back());
}

/// Replaces every core by its dense symmetric part; the network function is unchanged.
inline ChiNet symmetrise(const ChiNet& net)
{
    std::vector<Core> cores;
    cores.reserve(net.depth());
    for (const Core& c : net.cores()) cores.emplace_back(to_dense(c).symmetrised());
    return ChiNet(net.embedding(), std::move(cores), net.unembedding());
}

/// Uniform fan-in initialisation, ±sqrt(1/fan_in); factored cores.
template <class Rng>
ChiNet random_chinet(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t classes, Rng& rng)
{
    if (hidden.empty()) throw DimensionError("random_chinet: need at least one bond dimension");
    auto fill = [&rng](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(cols, 1)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : m.data()) v = dist(rng);
        return m;
    };
    Matrix e = fill(hidden[0], input_dim + 1);
    std::vector<Core> cores;
    for (std::size_t i = 1; i < hidden.size(); ++i) {
        Matrix a = fill(hidden[i], hidden[i - 1]);
        Matrix b = fill(hidden[i], hidden[i - 1]);
        cores.emplace_back(FactoredCore{std::move(a), std::move(b)});
    }
    Matrix u = fill(classes, hidden.back());
    return ChiNet(std::move(e), std::move(cores), std::move(u));
}

/// Coefficients of the unfolded tree tensor network: one multilinear form per class over
/// 2^L copies of the augmented input. Index order: class, then leaves left to right.
class PolyTensor {
public:
    PolyTensor(std::size_t classes, std::size_t augmented_dim, std::size_t degree, std::vector<double> coeffs)
        : classes_(classes), dim_(augmented_dim), degree_(degree), coeffs_(std::move(coeffs))
    {
        std::size_t per = 1;
        for (std::size_t i = 0; i < degree_; ++i) per *= dim_;
        if (coeffs_.size() != classes_ * per) throw DimensionError("PolyTensor: coefficient count mismatch");
        per_class_ = per;
    }

    std::size_t classes() const noexcept { return classes_; }
    std::size_t augmented_dim() const noexcept { return dim_; }
    std::size_t degree() const noexcept { return degree_; }
    std::size_t per_class() const noexcept { return per_class_; }
    std::span<const double> coefficients() const noexcept { return coeffs_; }
    std::span<const double> class_coefficients(std::size_t c) const
    {
        return std::span<const double>(coeffs_).subspan(c * per_class_, per_class_);
    }

    /// Evaluates every class form at augment(x) repeated degree() times.
    Vector evaluate(std::span<const double> x) const
    {
        const Vector xa = augment(x);
        if (xa.size() != dim_) throw DimensionError("PolyTensor::evaluate: input length mismatch");
        Vector out(classes_);
        for (std::size_t c = 0; c < classes_; ++c) {
            Vector cur(class_coefficients(c).begin(), class_coefficients(c).end());
            for (std::size_t t = 0; t < degree_; ++t) {
                const std::size_t next = cur.size() / dim_;
                Vector red(next, 0.0);
                for (std::size_t i = 0; i < next; ++i)
                    for (std::size_t k = 0; k < dim_; ++k) red[i] += cur[i * dim_ + k] * xa[k];
                cur = std::move(red);
            }
            out[c] = cur.empty() ? 0.0 : cur[0];
        }
        return out;
    }

    double frobenius() const noexcept { return norm2(coeffs_); }

private:
    std::size_t classes_;
    std::size_t dim_;
    std::size_t degree_;
    std::size_t per_class_ = 1;
    std::vector<double> coeffs_;
};

inline constexpr std::size_t kMaterialiseLimit = 10'000'000;

/// Subtree maps T_i: (augmented input)^{⊗2^{i-1}} -> bond i, for i = 1..L+1, as h_i × D^{2^{i-1}} matrices.
inline std::vector<Matrix> materialise_subtrees(const ChiNet& net, std::size_t limit = kMaterialiseLimit)
{
    const std::size_t dim = net.input_dim() + 1;
    double leaves_size = 1.0;
    for (std::size_t i = 0; i < (std::size_t{1} << net.depth()); ++i) leaves_size *= static_cast<double>(dim);
    double widest = 0.0;
    for (std::size_t h : net.bond_dims()) widest = std::max(widest, static_cast<double>(h));
    if (leaves_size * std::max<double>(static_cast<double>(net.num_classes()), widest) > static_cast<double>(limit))
        throw SizeGuardError("materialise: (d_in+1)^(2^L) x width exceeds desk-scale limit");

    std::vector<Matrix> trees;
    trees.push_back(net.embedding());
    for (const Core& c : net.cores()) {
        const Core3 f = to_dense(c);
        const Matrix& t = trees.back();
        const std::size_t n = t.cols();
        Matrix next(f.out_dim(), n * n);
        for (std::size_t l = 0; l < f.out_dim(); ++l) {
            const Matrix ft = matmul(f.slice(l), t);  // h × n
            const Matrix block = matmul_tn(t, ft);   // n × n, [J,K] = Σ_{j,k} T[j,J] f[l,j,k] T[k,K]
            std::copy(block.storage().begin(), block.storage().end(), next.row(l).begin());
        }
        trees.push_back(std::move(next));
    }
    return trees;
}

inline PolyTensor materialise_poly(const ChiNet& net, std::size_t limit = kMaterialiseLimit)
{
    const std::vector<Matrix> trees = materialise_subtrees(net, limit);
    const Matrix coeffs = matmul(net.unembedding(), trees.back());
    return PolyTensor(net.num_classes(), net.input_dim() + 1, std::size_t{1} << net.depth(), coeffs.storage());
}

/// ‖χ‖_F of the unfolded linear map, by materialisation.
inline double net_frobenius(const ChiNet& net, std::size_t limit = kMaterialiseLimit)
{
    return materialise_poly(net, limit).frobenius();
}

} // namespace chinet
