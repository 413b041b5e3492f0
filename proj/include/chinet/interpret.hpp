#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "chinet/errors.hpp"
#include "chinet/linalg.hpp"
#include "chinet/model.hpp"

namespace chinet {

/// Latents of the all-zero input: the propagated bias at bonds 1..L+1.
inline std::vector<Vector> bias_latents(const ChiNet& net)
{
    return latents(net, Vector(net.input_dim(), 0.0));
}

/// Coordinate of `bond` with the largest |overlap| with the propagated bias.
inline std::size_t constant_coordinate(const ChiNet& net, std::size_t bond)
{
    const Vector beta = bias_latents(net).at(bond - 1);
    std::size_t best = 0;
    for (std::size_t i = 1; i < beta.size(); ++i)
        if (std::abs(beta[i]) > std::abs(beta[best])) best = i;
    return best;
}

struct Atom {
    std::size_t row = 0;
    Vector vector;          // over the augmented input, bias first
    double importance = 0;  // bond-1 eigenvalue
};

/// Embedding rows ordered by their bond-1 eigenvalue, largest first.
inline std::vector<Atom> atoms(const ChiNet& net, const Vector& bond1_eigenvalues)
{
    const Matrix& e = net.embedding();
    if (bond1_eigenvalues.size() != e.rows())
        throw DimensionError("atoms: " + std::to_string(bond1_eigenvalues.size()) + " eigenvalues for " +
                             std::to_string(e.rows()) + " embedding rows");
    std::vector<Atom> out;
    for (std::size_t r = 0; r < e.rows(); ++r)
        out.push_back(Atom{r, Vector(e.row(r).begin(), e.row(r).end()), bond1_eigenvalues[r]});
    std::stable_sort(out.begin(), out.end(), [](const Atom& a, const Atom& b) { return a.importance > b.importance; });
    return out;
}

/// Norms of the three parts of an interaction matrix: the constant row/column (the [c,c]
/// entry counted here once), the rest of the diagonal, and everything else.
struct SliceDecomposition {
    double constant = 0.0;
    double diagonal = 0.0;
    double offdiag = 0.0;
};

struct InteractionMatrix {
    std::size_t layer = 0;  // 0-based core index
    std::size_t slice = 0;
    Matrix matrix;
    SliceDecomposition parts;
};

inline SliceDecomposition decompose_slice(const Matrix& m, std::size_t c)
{
    double cs = 0.0, ds = 0.0, os = 0.0;
    for (std::size_t j = 0; j < m.rows(); ++j)
        for (std::size_t k = 0; k < m.cols(); ++k) {
            const double v2 = m(j, k) * m(j, k);
            if (j == c || k == c) cs += v2;
            else if (j == k) ds += v2;
            else os += v2;
        }
    return {std::sqrt(cs), std::sqrt(ds), std::sqrt(os)};
}

inline InteractionMatrix interaction_matrix(const ChiNet& net, std::size_t layer, std::size_t slice)
{
    const Core3 f = to_dense(net.core(layer));
    if (slice >= f.out_dim()) throw DimensionError("interaction_matrix: slice out of range");
    InteractionMatrix im{layer, slice, f.slice(slice), {}};
    im.parts = decompose_slice(im.matrix, constant_coordinate(net, layer + 1));
    return im;
}

/// Share of ‖f‖² sitting in the constant row/column of every slice.
inline double constant_fraction(const Core3& f, std::size_t c)
{
    const double total = frobenius(f);
    if (total == 0.0) return 0.0;
    double cs = 0.0;
    for (std::size_t l = 0; l < f.out_dim(); ++l) cs += std::pow(decompose_slice(f.slice(l), c).constant, 2);
    return cs / (total * total);
}

/// Core `layer` (0-based) with the constant coordinate of its input bond.
inline double constant_fraction(const ChiNet& net, std::size_t layer)
{
    return constant_fraction(to_dense(net.core(layer)), constant_coordinate(net, layer + 1));
}

/// M_c = Σ_l u[c,l]·f_L[l,:,:], the class-c quadratic form on the root's input bond.
inline Matrix root_class_matrix(const ChiNet& net, std::size_t cls)
{
    if (net.depth() == 0) throw DimensionError("root_class_matrix: network has no cores");
    if (cls >= net.num_classes()) throw DimensionError("root_class_matrix: class " + std::to_string(cls) + " out of range");
    const Core3 f = to_dense(net.core(net.depth() - 1));
    const Matrix& u = net.unembedding();
    Matrix m(f.in_dim(), f.in_dim());
    for (std::size_t l = 0; l < f.out_dim(); ++l) {
        const double w = u(cls, l);
        if (w == 0.0) continue;
        for (std::size_t j = 0; j < f.in_dim(); ++j)
            for (std::size_t k = 0; k < f.in_dim(); ++k) m(j, k) += w * f(l, j, k);
    }
    for (std::size_t j = 0; j < m.rows(); ++j)
        for (std::size_t k = j + 1; k < m.cols(); ++k) m(j, k) = m(k, j) = 0.5 * (m(j, k) + m(k, j));
    return m;
}

struct EigenFeature {
    std::size_t cls = 0;
    std::size_t rank = 0;  // position within the class, by |λ|
    double eigenvalue = 0.0;
    Vector latent;         // unit vector on the root's input bond
    Vector projection;     // linear trace onto the input pixels (empty until traced)
};

inline constexpr double kFeatureZeroRelTol = 1e-12;
inline constexpr double kDisplayRelTol = 1e-6;

/// Signed eigenpairs of M_c by |λ| descending; numerically zero eigenvalues are dropped.
inline std::vector<EigenFeature> class_eigenfeatures(const Matrix& m, std::size_t cls = 0)
{
    const Spectrum s = sym_evd(m);
    double lmax = 0.0;
    for (double v : s.values) lmax = std::max(lmax, std::abs(v));
    std::vector<std::size_t> idx(s.values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(s.values[a]) > std::abs(s.values[b]); });
    std::vector<EigenFeature> out;
    for (std::size_t i : idx) {
        if (std::abs(s.values[i]) <= kFeatureZeroRelTol * lmax || s.values[i] == 0.0) continue;
        EigenFeature f;
        f.cls = cls;
        f.rank = out.size();
        f.eigenvalue = s.values[i];
        f.latent.resize(s.vectors.rows());
        for (std::size_t r = 0; r < s.vectors.rows(); ++r) f.latent[r] = s.vectors(r, i);
        out.push_back(std::move(f));
    }
    return out;
}

/// Pulls v from bond `from` down through the constant-interaction part of each core to bond
/// `to` (to = 0: through the embedding onto the raw input, bias column dropped). At each core
/// the map is its Jacobian at the bias latent β with non-constant interactions zeroed:
/// L[l,m] = 2β_c f[l,c,m] for m ≠ c and L[l,c] = 2 Σ_k f[l,c,k] β_k.
inline Vector linear_trace(const ChiNet& net, std::span<const double> v, std::size_t from, std::size_t to = 0)
{
    if (from < 1 || from > net.depth() + 1) throw DimensionError("linear_trace: bond " + std::to_string(from) + " invalid");
    if (to > from) throw DimensionError("linear_trace: target bond above source");
    if (v.size() != net.bond_dim(from)) throw DimensionError("linear_trace: vector length does not match the bond");
    const std::vector<Vector> beta = bias_latents(net);
    Vector w(v.begin(), v.end());
    for (std::size_t bond = from; bond > std::max<std::size_t>(to, 1); --bond) {
        const Core3 f = to_dense(net.core(bond - 2));
        const Vector& b = beta[bond - 2];
        std::size_t c = 0;
        for (std::size_t i = 1; i < b.size(); ++i)
            if (std::abs(b[i]) > std::abs(b[c])) c = i;
        Vector next(f.in_dim(), 0.0);
        for (std::size_t l = 0; l < f.out_dim(); ++l) {
            if (w[l] == 0.0) continue;
            double col_c = 0.0;
            for (std::size_t k = 0; k < f.in_dim(); ++k) col_c += f(l, c, k) * b[k];
            for (std::size_t m = 0; m < f.in_dim(); ++m)
                next[m] += w[l] * (m == c ? 2.0 * col_c : 2.0 * b[c] * f(l, c, m));
        }
        w = std::move(next);
    }
    if (to >= 1) return w;
    const Vector full = matvec_t(net.embedding(), w);
    return Vector(full.begin() + 1, full.end());
}

/// Eigenfeatures of every class, each traced to the input.
inline std::vector<std::vector<EigenFeature>> features(const ChiNet& net)
{
    std::vector<std::vector<EigenFeature>> out;
    for (std::size_t c = 0; c < net.num_classes(); ++c) {
        auto fs = class_eigenfeatures(root_class_matrix(net, c), c);
        for (EigenFeature& f : fs) f.projection = linear_trace(net, f.latent, net.depth());
        out.push_back(std::move(fs));
    }
    return out;
}

enum class ScoreMode { squared, linear };

struct ScoredFeature {
    std::size_t rank = 0;
    double eigenvalue = 0.0;
    double activation = 0.0;  // ⟨v, a⟩
    double score = 0.0;
};

struct ClassExplanation {
    std::size_t cls = 0;
    double logit = 0.0;
    double score_sum = 0.0;
    double positive = 0.0;           // sum of positive scores
    double negative = 0.0;           // sum of negative scores
    std::vector<ScoredFeature> top;  // by |score| descending
};

struct Explanation {
    Vector latent;  // input to the root core
    std::size_t predicted = 0;
    std::vector<ClassExplanation> classes;
};

/// Per-feature scores λ⟨v,a⟩² (or λ⟨v,a⟩) for every class at input x.
inline Explanation explain(const ChiNet& net, const std::vector<std::vector<EigenFeature>>& feats,
                           std::span<const double> x, ScoreMode mode = ScoreMode::squared)
{
    if (feats.size() != net.num_classes()) throw DimensionError("explain: one feature list per class expected");
    const std::vector<Vector> lat = latents(net, x);
    const Vector logits = matvec(net.unembedding(), lat.back());
    Explanation ex;
    ex.latent = lat.at(net.depth() - 1);
    ex.predicted = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    for (std::size_t c = 0; c < feats.size(); ++c) {
        ClassExplanation ce;
        ce.cls = c;
        ce.logit = logits[c];
        for (const EigenFeature& f : feats[c]) {
            if (f.latent.size() != ex.latent.size()) throw DimensionError("explain: feature does not live on the root bond");
            const double act = dot(f.latent, ex.latent);
            const double s = mode == ScoreMode::squared ? f.eigenvalue * act * act : f.eigenvalue * act;
            ce.top.push_back(ScoredFeature{f.rank, f.eigenvalue, act, s});
            ce.score_sum += s;
            (s >= 0.0 ? ce.positive : ce.negative) += s;
        }
        std::stable_sort(ce.top.begin(), ce.top.end(),
                         [](const ScoredFeature& a, const ScoredFeature& b) { return std::abs(a.score) > std::abs(b.score); });
        ex.classes.push_back(std::move(ce));
    }
    return ex;
}

} // namespace chinet
