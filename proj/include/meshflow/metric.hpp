#pragma once

#include "meshflow/geometry.hpp"
#include "meshflow/parallel.hpp"

#include <functional>
#include <limits>
#include <map>
#include <set>

/// Metric tensor field construction: least-squares Hessian recovery from nodal
/// values, SPD absolute value, and the L2-optimal metric for linear elements.
namespace meshflow {

template <int D>
struct MetricField {
    std::vector<Mat<D>> nodal;  // one SPD matrix per vertex
    double m_lower = 0.0;       // eigenvalue bounds over all vertices
    double m_upper = 0.0;
};

struct HessianRecoveryConfig {
    int patch_depth = 1;          // graph distance of the fitting neighborhood
    double eigen_floor = 1e-3;    // relative floor for |lambda|
    double absolute_floor = 1e-8;
};

/// |H| = Q diag(|l_1|,...,|l_d|) Q^T with eigenvalues floored at
/// max(eigen_floor * max|l_j|, absolute_floor), so the result is always SPD.
template <int D>
Mat<D> absolute_value_spd(const Mat<D>& H, double eigen_floor, double absolute_floor = 1e-8) {
    Eigen::SelfAdjointEigenSolver<Mat<D>> es(H);
    Vec<D> lam = es.eigenvalues().cwiseAbs();
    const double floor = std::max(eigen_floor * lam.maxCoeff(), absolute_floor);
    for (int i = 0; i < D; ++i) lam[i] = std::max(lam[i], floor);
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

namespace detail {

/// Vertices within graph distance `depth` of vertex i (including i itself).
template <int D>
std::vector<int> vertex_neighborhood(const SimplicialMesh<D>& mesh, int i, int depth) {
    std::set<int> seen{i};
    std::vector<int> frontier{i};
    for (int level = 0; level < depth; ++level) {
        std::vector<int> next;
        for (int v : frontier)
            for (int k : mesh.vertex_patches[v])
                for (int w : mesh.elements[k])
                    if (seen.insert(w).second) next.push_back(w);
        frontier = std::move(next);
    }
    return {seen.begin(), seen.end()};
}

constexpr int quad_coeffs(int d) { return 1 + d + d * (d + 1) / 2; }

/// Quadratic least-squares fit around vertex i; returns the Hessian of the fit
/// or nullopt when the patch is rank-deficient.
template <int D>
bool fit_vertex_hessian(const SimplicialMesh<D>& mesh, const std::vector<double>& u,
                        int i, int depth, Mat<D>& H_out) {
    const auto patch = vertex_neighborhood(mesh, i, depth);
    const int nc = quad_coeffs(D);
    if (static_cast<int>(patch.size()) < nc) return false;

    // center and scale for conditioning
    const Vec<D> x0 = mesh.vertices[i];
    double h = 0.0;
    for (int v : patch) h = std::max(h, (mesh.vertices[v] - x0).norm());
    if (h <= 0.0) return false;

    Eigen::MatrixXd A(patch.size(), nc);
    Eigen::VectorXd b(patch.size());
    for (size_t r = 0; r < patch.size(); ++r) {
        Vec<D> xi = (mesh.vertices[patch[r]] - x0) / h;
        int c = 0;
        A(r, c++) = 1.0;
        for (int a = 0; a < D; ++a) A(r, c++) = xi[a];
        for (int a = 0; a < D; ++a)
            for (int bb = a; bb < D; ++bb) A(r, c++) = xi[a] * xi[bb];
        b(r) = u[patch[r]];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    qr.setThreshold(1e-10);
    if (qr.rank() < nc) return false;
    Eigen::VectorXd coef = qr.solve(b);

    int c = 1 + D;
    for (int a = 0; a < D; ++a)
        for (int bb = a; bb < D; ++bb) {
            double second = (a == bb) ? 2.0 * coef(c) : coef(c);
            H_out(a, bb) = second / (h * h);
            H_out(bb, a) = H_out(a, bb);
            ++c;
        }
    return true;
}

}  // namespace detail

/// Per-element recovered Hessian: quadratic fit at each vertex (patch enlarged
/// once on rank deficiency), then the element takes the mean of its vertices.
template <int D>
std::vector<Mat<D>> recover_hessian(const SimplicialMesh<D>& mesh, const std::vector<double>& u,
                                    const HessianRecoveryConfig& cfg = {}) {
    if (cfg.patch_depth < 1) throw std::invalid_argument("patch_depth must be >= 1");
    const int nv = mesh.num_vertices();
    std::vector<Mat<D>> vertex_h(nv);
    std::vector<int> failed(nv, 0);
    parallel_for(nv, [&](int i) {
        if (!detail::fit_vertex_hessian(mesh, u, i, cfg.patch_depth, vertex_h[i]) &&
            !detail::fit_vertex_hessian(mesh, u, i, cfg.patch_depth + 1, vertex_h[i]))
            failed[i] = 1;
    });
    for (int i = 0; i < nv; ++i)
        if (failed[i])
            throw std::runtime_error("hessian recovery: rank-deficient patch at vertex " +
                                     std::to_string(i));
    std::vector<Mat<D>> element_h(mesh.num_elements());
    for (int k = 0; k < mesh.num_elements(); ++k) {
        Mat<D> H = Mat<D>::Zero();
        for (int v : mesh.elements[k]) H += vertex_h[v];
        element_h[k] = H / double(D + 1);
    }
    return element_h;
}

/// M_K = det(|H_K|)^(-1/(d+4)) |H_K| per element, volume-averaged to vertices.
template <int D>
MetricField<D> build_metric(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                            const std::vector<double>& u, const HessianRecoveryConfig& cfg = {}) {
    const auto element_h = recover_hessian(mesh, u, cfg);
    std::vector<Mat<D>> element_m(mesh.num_elements());
    std::vector<double> volume(mesh.num_elements());
    // Floor each |H_K| relative to the largest curvature seen anywhere on the
    // mesh.  A floor relative only to the element's own eigenvalues leaves
    // near-flat regions with metrics many orders of magnitude below the rest
    // of the field, which blows up the functional scale and starves the
    // integrator of usable step sizes.
    double lam_global = 0.0;
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const Mat<D> absH = absolute_value_spd<D>(element_h[k], cfg.eigen_floor, cfg.absolute_floor);
        Eigen::SelfAdjointEigenSolver<Mat<D>> es(absH);
        lam_global = std::max(lam_global, es.eigenvalues().maxCoeff());
        element_m[k] = absH;  // reused below once the global floor is known
    }
    const double lam_floor = std::max(cfg.eigen_floor * lam_global, cfg.absolute_floor);
    for (int k = 0; k < mesh.num_elements(); ++k) {
        Eigen::SelfAdjointEigenSolver<Mat<D>> es(element_m[k]);
        const Vec<D> lam = es.eigenvalues().cwiseMax(lam_floor);
        const Mat<D> absH = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
        element_m[k] = std::pow(absH.determinant(), -1.0 / (D + 4)) * absH;
        volume[k] = element_geometry(mesh, ref, k).volume;
    }
    MetricField<D> field;
    field.nodal.assign(mesh.num_vertices(), Mat<D>::Zero());
    for (int i = 0; i < mesh.num_vertices(); ++i) {
        double wsum = 0.0;
        for (int k : mesh.vertex_patches[i]) {
            field.nodal[i] += volume[k] * element_m[k];
            wsum += volume[k];
        }
        if (wsum <= 0.0) throw std::runtime_error("vertex " + std::to_string(i) + " has no elements");
        field.nodal[i] /= wsum;
    }
    field.m_lower = std::numeric_limits<double>::max();
    field.m_upper = 0.0;
    for (const auto& M : field.nodal) {
        Eigen::SelfAdjointEigenSolver<Mat<D>> es(M);
        field.m_lower = std::min(field.m_lower, es.eigenvalues().minCoeff());
        field.m_upper = std::max(field.m_upper, es.eigenvalues().maxCoeff());
    }
    return field;
}

/// M_K: arithmetic mean of the element's nodal metrics.
template <int D>
Mat<D> element_average_metric(const MetricField<D>& field, const SimplicialMesh<D>& mesh, int k) {
    Mat<D> M = Mat<D>::Zero();
    for (int v : mesh.elements[k]) M += field.nodal[v];
    return M / double(D + 1);
}

/// Piecewise-linear metric field frozen on a mesh snapshot. During mesh
/// movement the metric must stay attached to physical space, not to the
/// moving vertices, so nodal values are re-sampled from this background at
/// the current vertex positions. Queries locate their element by walking
/// across faces from a caller-kept hint, with a brute-force fallback.
template <int D>
class MetricSampler {
public:
    MetricSampler(const SimplicialMesh<D>& mesh, std::vector<Mat<D>> nodal)
        : vertices_(mesh.vertices), elements_(mesh.elements), nodal_(std::move(nodal)) {
        if (nodal_.size() != vertices_.size())
            throw std::invalid_argument("metric sampler: nodal metric count mismatch");
        std::map<std::array<int, D>, std::pair<int, int>> face_owner;
        neighbors_.assign(elements_.size(), {});
        for (int k = 0; k < static_cast<int>(elements_.size()); ++k) {
            neighbors_[k].fill(-1);
            for (int j = 0; j <= D; ++j) {
                std::array<int, D> face;
                for (int a = 0, w = 0; a <= D; ++a)
                    if (a != j) face[w++] = elements_[k][a];
                std::sort(face.begin(), face.end());
                auto [it, fresh] = face_owner.try_emplace(face, std::make_pair(k, j));
                if (!fresh) {
                    neighbors_[k][j] = it->second.first;
                    neighbors_[it->second.first][it->second.second] = k;
                }
            }
        }
    }

    int num_elements() const { return static_cast<int>(elements_.size()); }

    /// Element containing q (by walking from `hint`) and its barycentric
    /// coordinates, clamped to the closest element for points that leave the
    /// snapshot's hull by round-off.
    int locate(const Vec<D>& q, int hint, Eigen::Matrix<double, D + 1, 1>& lambda) const {
        int k = (hint >= 0 && hint < num_elements()) ? hint : 0;
        for (int walk = 0; walk < 4 * num_elements(); ++walk) {
            barycentric(k, q, lambda);
            int worst = 0;
            for (int j = 1; j <= D; ++j)
                if (lambda[j] < lambda[worst]) worst = j;
            if (lambda[worst] >= -1e-12) return k;
            const int next = neighbors_[k][worst];
            if (next < 0) break;  // walked out of the hull
            k = next;
        }
        // fallback: the least-negative element over the whole snapshot
        int best = 0;
        double best_score = -std::numeric_limits<double>::max();
        Eigen::Matrix<double, D + 1, 1> lam;
        for (int e = 0; e < num_elements(); ++e) {
            barycentric(e, q, lam);
            const double score = lam.minCoeff();
            if (score > best_score) {
                best_score = score;
                best = e;
                lambda = lam;
            }
        }
        return best;
    }

    /// M(q): barycentric interpolation of the snapshot's nodal metrics.
    Mat<D> sample(const Vec<D>& q, int& hint) const {
        Eigen::Matrix<double, D + 1, 1> lambda;
        hint = locate(q, hint, lambda);
        lambda = lambda.cwiseMax(0.0);
        lambda /= lambda.sum();
        Mat<D> M = Mat<D>::Zero();
        for (int j = 0; j <= D; ++j) M += lambda[j] * nodal_[elements_[hint][j]];
        return M;
    }

    /// Spatial gradient of the interpolated field at q: grad[a] = dM/dx_a,
    /// constant inside the background element containing q.
    std::array<Mat<D>, D> gradient(const Vec<D>& q, int& hint) const {
        Eigen::Matrix<double, D + 1, 1> lambda;
        hint = locate(q, hint, lambda);
        Mat<D> E;
        for (int j = 0; j < D; ++j)
            E.col(j) = vertices_[elements_[hint][j + 1]] - vertices_[elements_[hint][0]];
        const Mat<D> Einv = E.inverse();
        std::array<Mat<D>, D> grad;
        for (int a = 0; a < D; ++a) grad[a].setZero();
        for (int j = 0; j <= D; ++j) {
            RowVec<D> dphi;
            if (j == 0)
                dphi = -Einv.colwise().sum();
            else
                dphi = Einv.row(j - 1);
            for (int a = 0; a < D; ++a) grad[a] += dphi[a] * nodal_[elements_[hint][j]];
        }
        return grad;
    }

private:
    void barycentric(int k, const Vec<D>& q, Eigen::Matrix<double, D + 1, 1>& lambda) const {
        Mat<D> E;
        for (int j = 0; j < D; ++j)
            E.col(j) = vertices_[elements_[k][j + 1]] - vertices_[elements_[k][0]];
        const Vec<D> mu = E.fullPivLu().solve(q - vertices_[elements_[k][0]]);
        lambda[0] = 1.0 - mu.sum();
        for (int j = 0; j < D; ++j) lambda[j + 1] = mu[j];
    }

    std::vector<Vec<D>> vertices_;
    std::vector<std::array<int, D + 1>> elements_;
    std::vector<Mat<D>> nodal_;
    std::vector<std::array<int, D + 1>> neighbors_;  // per element, across face opposite j
};

/// Uniform metric field M = c*I.
template <int D, typename Derived>
MetricField<D> constant_metric(const SimplicialMesh<D>& mesh,
                               const Eigen::MatrixBase<Derived>& M_expr) {
    const Mat<D> M = M_expr;
    MetricField<D> field;
    field.nodal.assign(mesh.vertices.size(), M);
    Eigen::SelfAdjointEigenSolver<Mat<D>> es(M);
    field.m_lower = es.eigenvalues().minCoeff();
    field.m_upper = es.eigenvalues().maxCoeff();
    return field;
}

}  // namespace meshflow
