#pragma once

#include "meshflow/functional.hpp"

#include <algorithm>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>

/// Discrete moving-mesh equation: nodal velocities assembled from the
/// integrand derivative quadruples, boundary sliding, and energy-monotone
/// explicit time integration of the mesh trajectory.
namespace meshflow {

struct MmpdeConfig {
    double tau = 1e-2;
    double t_final = 5.0;
    double dt_init = 1e-4;
    double dt_min = 1e-12;
    double dt_max = 1e-2;
    double energy_backtrack_factor = 0.5;
    double dt_growth = 1.2;
    bool metric_refresh = true;
    // The gradient flow is stiff: velocities near a fresh interface can exceed
    // the step-acceptance scale by many orders of magnitude. The trial step is
    // therefore also capped so no vertex moves more than a fraction of the
    // shortest edge, and the run ends early (converged) once the energy stops
    // making relative progress instead of grinding to t_final at the explicit
    // stability limit.
    double max_displacement_frac = 0.2;
    double convergence_rel_tol = 1e-9;
    int convergence_window = 100;
    long max_steps = 500000;
};

template <int D>
using VelocityField = std::vector<Vec<D>>;

struct TrajectoryRecord {
    std::vector<double> times;
    std::vector<double> energies;
    std::vector<double> min_volume;
    std::vector<double> min_metric_altitude;
    std::vector<long> accepted_so_far;
    long accepted = 0;
    long rejected = 0;
    bool converged = false;  // stopped on energy stall before reaching t_final
};

class StagnationError : public std::runtime_error {
public:
    StagnationError(const std::string& what, int element, int vertex)
        : std::runtime_error(what), element_(element), vertex_(vertex) {}
    int element() const { return element_; }
    int vertex() const { return vertex_; }

private:
    int element_;
    int vertex_;
};

/// Local vertex velocities of one element:
///   [v_1 .. v_d]^T = -G E_K^-1 + E_K^-1 (dG/dJ) E_hat E_K^-1
///                    + dG/ddetJ * det(E_hat)/det(E_K) * E_K^-1
///                    - 1/(d+1) sum_j tr(dG/dM M_j) [dphi_j/dx; ...]
///   v_0^T = -sum_k v_k^T - sum_j tr(dG/dM M_j) dphi_j/dx.
template <int D>
std::array<Vec<D>, D + 1> local_velocities(const ElementGeometry<D>& geom,
                                           const ReferenceElement<D>& ref,
                                           const GDerivatives<D>& derivs,
                                           const std::array<Mat<D>, D + 1>& nodal_metrics) {
    std::array<double, D + 1> c;
    for (int j = 0; j <= D; ++j) c[j] = (derivs.dG_dM * nodal_metrics[j]).trace();

    Mat<D> V = -derivs.G * geom.E_K_inv + geom.E_K_inv * derivs.dG_dJ * ref.E_hat * geom.E_K_inv +
               derivs.dG_ddetJ * (ref.det_E_hat / geom.det_E_K) * geom.E_K_inv;
    RowVec<D> w = RowVec<D>::Zero();
    for (int j = 0; j <= D; ++j) w += c[j] * geom.basis_gradients[j];
    V.rowwise() -= w / double(D + 1);

    std::array<Vec<D>, D + 1> v;
    RowVec<D> v0 = -w;
    for (int j = 1; j <= D; ++j) {
        v[j] = V.row(j - 1).transpose();
        v0 -= V.row(j - 1);
    }
    v[0] = v0.transpose();
    return v;
}

/// Like local_velocities, but the metric-variation term uses the spatial
/// gradient of a frozen background metric field at each vertex: vertex j of K
/// receives -(1/(d+1)) r_j, r_j[a] = tr(dG/dM * dM_bg/dx_a (x_j)). This is the
/// exact derivative of I_h when the nodal metrics are re-sampled from that
/// background field as the vertices move.
template <int D>
std::array<Vec<D>, D + 1> local_velocities_field(const ElementGeometry<D>& geom,
                                                 const ReferenceElement<D>& ref,
                                                 const GDerivatives<D>& derivs,
                                                 const std::array<RowVec<D>, D + 1>& r) {
    Mat<D> V = -derivs.G * geom.E_K_inv + geom.E_K_inv * derivs.dG_dJ * ref.E_hat * geom.E_K_inv +
               derivs.dG_ddetJ * (ref.det_E_hat / geom.det_E_K) * geom.E_K_inv;
    std::array<Vec<D>, D + 1> v;
    RowVec<D> v0 = RowVec<D>::Zero();
    for (int j = 1; j <= D; ++j) {
        v[j] = V.row(j - 1).transpose();
        v0 -= V.row(j - 1);
    }
    v[0] = v0.transpose();
    for (int j = 0; j <= D; ++j) v[j] -= r[j].transpose() / double(D + 1);
    return v;
}

/// Patch-assembled nodal gradient: entry i equals sum_{K in omega_i} |K| v_{i_K}^K,
/// which is -(dI_h/dx_i)^T.
template <int D>
VelocityField<D> assemble_gradient(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                                   const MetricField<D>& metric, const FunctionalSpec& spec,
                                   double gamma) {
    const int ne = mesh.num_elements();
    std::vector<std::array<Vec<D>, D + 1>> local(ne);
    std::vector<double> volume(ne);
    parallel_for(ne, [&](int k) {
        const auto geom = element_geometry(mesh, ref, k);
        std::array<Mat<D>, D + 1> nodal;
        Mat<D> M = Mat<D>::Zero();
        for (int j = 0; j <= D; ++j) {
            nodal[j] = metric.nodal[mesh.elements[k][j]];
            M += nodal[j];
        }
        M /= double(D + 1);
        const auto g = g_derivatives<D>(geom.J, geom.det_J, M, gamma, spec);
        local[k] = local_velocities(geom, ref, g, nodal);
        volume[k] = geom.volume;
    });
    VelocityField<D> out(mesh.num_vertices(), Vec<D>::Zero());
    for (int k = 0; k < ne; ++k)
        for (int j = 0; j <= D; ++j) out[mesh.elements[k][j]] += volume[k] * local[k][j];
    return out;
}

/// Exact nodal gradient of the centroid-sampled energy: each element's metric
/// is M(c_K) from the frozen background field, so moving vertex j shifts the
/// centroid by dx/(D+1) and contributes tr(dG_dM * dM/dx_a)/(D+1) on top of
/// the geometric terms. Element hints are advanced in place.
template <int D>
VelocityField<D> assemble_gradient_centroid(const SimplicialMesh<D>& mesh,
                                            const ReferenceElement<D>& ref,
                                            const MetricSampler<D>& background,
                                            std::vector<int>& ehints, const FunctionalSpec& spec,
                                            double gamma) {
    const int ne = mesh.num_elements();
    std::vector<std::array<Vec<D>, D + 1>> local(ne);
    std::vector<double> volume(ne);
    parallel_for(ne, [&](int k) {
        const auto geom = element_geometry(mesh, ref, k);
        Vec<D> c = Vec<D>::Zero();
        for (int j = 0; j <= D; ++j) c += mesh.vertices[mesh.elements[k][j]];
        c /= double(D + 1);
        const Mat<D> M = background.sample(c, ehints[k]);
        const auto grads = background.gradient(c, ehints[k]);
        const auto g = g_derivatives<D>(geom.J, geom.det_J, M, gamma, spec);
        RowVec<D> rc;
        for (int a = 0; a < D; ++a) rc[a] = (g.dG_dM * grads[a]).trace();
        std::array<RowVec<D>, D + 1> r;
        r.fill(rc);
        local[k] = local_velocities_field(geom, ref, g, r);
        volume[k] = geom.volume;
    });
    VelocityField<D> out(mesh.num_vertices(), Vec<D>::Zero());
    for (int k = 0; k < ne; ++k)
        for (int j = 0; j <= D; ++j) out[mesh.elements[k][j]] += volume[k] * local[k][j];
    return out;
}

/// Balance factor P_i, evaluated from det(M) at vertex i.
template <int D>
double balance_factor(const FunctionalSpec& spec, const Mat<D>& M_i) {
    const double det = M_i.determinant();
    if (spec.kind == FunctionalSpec::Kind::Existing) return std::pow(det, (spec.p - 1.0) / 2.0);
    return std::pow(det, 2.0 / D);
}

/// Corner vertices are pinned; boundary vertices keep only the tangential part.
template <int D>
VelocityField<D> boundary_project(const SimplicialMesh<D>& mesh, const VelocityField<D>& raw) {
    VelocityField<D> out = raw;
    for (int i = 0; i < mesh.num_vertices(); ++i) {
        const auto& tag = mesh.boundary[i];
        if (tag.cls == VertexClass::Corner) {
            out[i].setZero();
        } else if (tag.cls == VertexClass::Boundary) {
            if (tag.segment < 0 || tag.segment >= static_cast<int>(mesh.segments.size()))
                throw std::runtime_error("boundary vertex " + std::to_string(i) +
                                         " has no segment geometry");
            const Vec<D>& t = mesh.segments[tag.segment].tangent;
            out[i] = t * t.dot(raw[i]);
        }
    }
    return out;
}

/// dx_i/dt = (P_i / tau) sum_{K in omega_i} |K| v_{i_K}^K, boundary-projected.
template <int D>
VelocityField<D> assemble_velocities(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                                     const MetricField<D>& metric, const FunctionalSpec& spec,
                                     const MmpdeConfig& cfg,
                                     std::optional<double> frozen_gamma = std::nullopt) {
    const double gamma =
        frozen_gamma ? *frozen_gamma : gamma_h(sigma_h(mesh, ref, metric), mesh.num_elements(), D);
    VelocityField<D> v = assemble_gradient<D>(mesh, ref, metric, spec, gamma);
    for (int i = 0; i < mesh.num_vertices(); ++i)
        v[i] *= balance_factor<D>(spec, metric.nodal[i]) / cfg.tau;
    return boundary_project(mesh, v);
}

/// Centroid-sampled counterpart of assemble_velocities: the gradient is taken
/// against the frozen background field while the balance factors P_i come from
/// the nodal metrics sampled at the current vertex positions.
template <int D>
VelocityField<D> assemble_velocities_centroid(const SimplicialMesh<D>& mesh,
                                              const ReferenceElement<D>& ref,
                                              const MetricSampler<D>& background,
                                              std::vector<int>& ehints,
                                              const MetricField<D>& nodal_metric,
                                              const FunctionalSpec& spec, const MmpdeConfig& cfg,
                                              double gamma) {
    VelocityField<D> v = assemble_gradient_centroid<D>(mesh, ref, background, ehints, spec, gamma);
    for (int i = 0; i < mesh.num_vertices(); ++i)
        v[i] *= balance_factor<D>(spec, nodal_metric.nodal[i]) / cfg.tau;
    return boundary_project(mesh, v);
}

/// I_h as a function of displaced vertex positions, with the metric linearized
/// per element around the base state: M_K(x) = M_K^0 + mean_j grad(M)|_K (x_j - x_j^0),
/// where grad(M)|_K is the interpolant gradient sum_j M_j^0 (x) dphi_j/dx. The
/// assembled gradient above is the exact derivative of this energy at x = x^0.
template <int D>
double energy_at_displaced(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                           const MetricField<D>& metric, const FunctionalSpec& spec, double gamma,
                           const std::vector<Vec<D>>& positions) {
    double I = 0.0;
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const auto& elem = mesh.elements[k];
        const auto base = element_geometry(mesh, ref, k);

        Mat<D> M = Mat<D>::Zero();
        std::array<Mat<D>, D> grad;  // grad[a] = dM/dx_a on K, from the base interpolant
        for (int a = 0; a < D; ++a) grad[a].setZero();
        for (int j = 0; j <= D; ++j) {
            const Mat<D>& Mj = metric.nodal[elem[j]];
            M += Mj;
            for (int a = 0; a < D; ++a) grad[a] += base.basis_gradients[j][a] * Mj;
        }
        M /= double(D + 1);
        for (int j = 0; j <= D; ++j) {
            const Vec<D> dx = positions[elem[j]] - mesh.vertices[elem[j]];
            for (int a = 0; a < D; ++a) M += (dx[a] / double(D + 1)) * grad[a];
        }

        Mat<D> E;
        for (int j = 0; j < D; ++j) E.col(j) = positions[elem[j + 1]] - positions[elem[0]];
        const double det = E.determinant();
        if (det <= mesh.degenerate_tol) throw SingularElementError(k, det);
        const Mat<D> J = ref.E_hat * E.inverse();
        const double detJ = ref.det_E_hat / det;
        I += det / factorial(D) * g_derivatives<D>(J, detJ, M, gamma, spec).G;
    }
    return I;
}

namespace detail {

template <int D>
bool trial_valid(const SimplicialMesh<D>& mesh, const std::vector<Vec<D>>& positions,
                 int& bad_element) {
    for (int k = 0; k < mesh.num_elements(); ++k) {
        Mat<D> E;
        for (int j = 0; j < D; ++j)
            E.col(j) = positions[mesh.elements[k][j + 1]] - positions[mesh.elements[k][0]];
        if (E.determinant() <= mesh.degenerate_tol) {
            bad_element = k;
            return false;
        }
    }
    return true;
}

/// Boundary vertices are re-snapped onto their segment after the Euler update.
template <int D>
void snap_to_boundary(const SimplicialMesh<D>& mesh, std::vector<Vec<D>>& positions) {
    for (int i = 0; i < mesh.num_vertices(); ++i) {
        const auto& tag = mesh.boundary[i];
        if (tag.cls == VertexClass::Corner) {
            positions[i] = mesh.vertices[i];
        } else if (tag.cls == VertexClass::Boundary) {
            const auto& seg = mesh.segments[tag.segment];
            double t = (positions[i] - seg.origin).dot(seg.tangent);
            t = std::clamp(t, 0.0, seg.length);
            positions[i] = seg.origin + t * seg.tangent;
        }
    }
}

template <int D>
double min_edge_length(const SimplicialMesh<D>& mesh) {
    double h = std::numeric_limits<double>::max();
    for (const auto& elem : mesh.elements)
        for (int a = 0; a <= D; ++a)
            for (int b = a + 1; b <= D; ++b)
                h = std::min(h, (mesh.vertices[elem[a]] - mesh.vertices[elem[b]]).norm());
    return h;
}

/// Shortest incident edge per vertex.
template <int D>
std::vector<double> local_edge_length(const SimplicialMesh<D>& mesh) {
    std::vector<double> h(mesh.num_vertices(), std::numeric_limits<double>::max());
    for (const auto& elem : mesh.elements)
        for (int a = 0; a <= D; ++a)
            for (int b = a + 1; b <= D; ++b) {
                const double len = (mesh.vertices[elem[a]] - mesh.vertices[elem[b]]).norm();
                h[elem[a]] = std::min(h[elem[a]], len);
                h[elem[b]] = std::min(h[elem[b]], len);
            }
    return h;
}

/// Per-vertex positive rescaling of the velocity field so no vertex would move
/// more than max_displacement_frac of its shortest incident edge in one nominal
/// step. A positive per-vertex scaling keeps the field a descent direction for
/// the energy, so the backtracking acceptance below still applies unchanged.
template <int D>
VelocityField<D> clip_displacements(const SimplicialMesh<D>& mesh, const VelocityField<D>& v,
                                    double dt_nominal, double frac) {
    const auto h = local_edge_length(mesh);
    VelocityField<D> out = v;
    for (int i = 0; i < mesh.num_vertices(); ++i) {
        const double move = dt_nominal * v[i].norm();
        if (move > frac * h[i]) out[i] *= frac * h[i] / move;
    }
    return out;
}

/// Energy restricted to the patch of vertex i, with vertex i displaced to xi
/// and its nodal metric re-sampled from the background field. Returns +inf if
/// the displacement degenerates a patch element.
template <int D>
double patch_energy(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                    const MetricField<D>& field, const MetricSampler<D>& background,
                    const FunctionalSpec& spec, double gamma, int i, const Vec<D>& xi, int hint) {
    Mat<D> Mi = background.sample(xi, hint);
    double I = 0.0;
    for (int k : mesh.vertex_patches[i]) {
        const auto& elem = mesh.elements[k];
        Mat<D> E;
        Mat<D> M = Mat<D>::Zero();
        for (int j = 0; j <= D; ++j)
            M += (elem[j] == i) ? Mi : field.nodal[elem[j]];
        M /= double(D + 1);
        const auto at = [&](int vtx) { return vtx == i ? xi : mesh.vertices[vtx]; };
        for (int j = 0; j < D; ++j) E.col(j) = at(elem[j + 1]) - at(elem[0]);
        const double det = E.determinant();
        if (det <= mesh.degenerate_tol) return std::numeric_limits<double>::infinity();
        const Mat<D> J = ref.E_hat * E.inverse();
        I += det / factorial(D) * g_derivatives<D>(J, ref.det_E_hat / det, M, gamma, spec).G;
    }
    return I;
}

/// Full-scale preconditioned displacement field. Each vertex moves along its
/// own velocity direction by the smaller of a one-dimensional Newton-safe step
/// (slope and curvature probed from the patch energy) and a fraction of its
/// shortest incident edge, so a single stiff vertex no longer forces the
/// global step size down for everyone. The direction of every component is
/// unchanged (a positive per-vertex rescaling), so the field remains a descent
/// direction and the backtracking acceptance applies as before.
template <int D>
std::vector<Vec<D>> precondition_displacements(const SimplicialMesh<D>& mesh,
                                               const ReferenceElement<D>& ref,
                                               const MetricField<D>& field,
                                               const MetricSampler<D>& background,
                                               const std::vector<int>& hints,
                                               const FunctionalSpec& spec, double gamma,
                                               const VelocityField<D>& v, double frac) {
    const auto h = local_edge_length(mesh);
    std::vector<Vec<D>> out(mesh.num_vertices(), Vec<D>::Zero());
    parallel_for(mesh.num_vertices(), [&](int i) {
        const double vn = v[i].norm();
        if (vn == 0.0) return;
        double cap = frac * h[i];
        const Vec<D> u = v[i] / vn;
        const double eps = 1e-4 * h[i];
        const double e0 =
            patch_energy(mesh, ref, field, background, spec, gamma, i, mesh.vertices[i], hints[i]);
        const double ep = patch_energy(mesh, ref, field, background, spec, gamma, i,
                                       Vec<D>(mesh.vertices[i] + eps * u), hints[i]);
        const double em = patch_energy(mesh, ref, field, background, spec, gamma, i,
                                       Vec<D>(mesh.vertices[i] - eps * u), hints[i]);
        if (std::isfinite(ep) && std::isfinite(em)) {
            const double curv = (ep - 2.0 * e0 + em) / (eps * eps);
            const double slope = (ep - em) / (2.0 * eps);
            if (curv > 0.0 && slope < 0.0) cap = std::min(cap, -slope / curv);
        }
        out[i] = cap * u;
    });
    return out;
}

/// Energy restricted to the patch of vertex i, with vertex i displaced to xi
/// and every patch element's metric sampled at its centroid from the
/// background field. Returns +inf if the displacement degenerates an element.
template <int D>
double patch_energy_centroid(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                             const MetricSampler<D>& background, const std::vector<int>& ehints,
                             const FunctionalSpec& spec, double gamma, int i, const Vec<D>& xi) {
    double I = 0.0;
    for (int k : mesh.vertex_patches[i]) {
        const auto& elem = mesh.elements[k];
        Mat<D> E;
        Vec<D> c = Vec<D>::Zero();
        const auto at = [&](int vtx) { return vtx == i ? xi : mesh.vertices[vtx]; };
        for (int j = 0; j <= D; ++j) c += at(elem[j]);
        c /= double(D + 1);
        for (int j = 0; j < D; ++j) E.col(j) = at(elem[j + 1]) - at(elem[0]);
        const double det = E.determinant();
        if (det <= mesh.degenerate_tol) return std::numeric_limits<double>::infinity();
        int hint = ehints[k];
        const Mat<D> M = background.sample(c, hint);
        const Mat<D> J = ref.E_hat * E.inverse();
        I += det / factorial(D) * g_derivatives<D>(J, ref.det_E_hat / det, M, gamma, spec).G;
    }
    return I;
}

/// Full-scale preconditioned displacement field for the centroid-sampled
/// energy; see precondition_displacements for the rationale.
template <int D>
std::vector<Vec<D>> precondition_displacements_centroid(
    const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
    const MetricSampler<D>& background, const std::vector<int>& ehints, const FunctionalSpec& spec,
    double gamma, const VelocityField<D>& v, double frac) {
    const auto h = local_edge_length(mesh);
    std::vector<Vec<D>> out(mesh.num_vertices(), Vec<D>::Zero());
    parallel_for(mesh.num_vertices(), [&](int i) {
        const double vn = v[i].norm();
        if (vn == 0.0) return;
        double cap = frac * h[i];
        const Vec<D> u = v[i] / vn;
        const double eps = 1e-4 * h[i];
        const double e0 = patch_energy_centroid(mesh, ref, background, ehints, spec, gamma, i,
                                                mesh.vertices[i]);
        const double ep = patch_energy_centroid(mesh, ref, background, ehints, spec, gamma, i,
                                                Vec<D>(mesh.vertices[i] + eps * u));
        const double em = patch_energy_centroid(mesh, ref, background, ehints, spec, gamma, i,
                                                Vec<D>(mesh.vertices[i] - eps * u));
        if (std::isfinite(ep) && std::isfinite(em)) {
            const double curv = (ep - 2.0 * e0 + em) / (eps * eps);
            const double slope = (ep - em) / (2.0 * eps);
            if (curv > 0.0 && slope < 0.0) cap = std::min(cap, -slope / curv);
        }
        out[i] = cap * u;
    });
    return out;
}

/// I_h at trial positions with each element's metric sampled at its centroid
/// from the background field; element hints are advanced in place. Throws
/// SingularElementError on a degenerate trial element.
template <int D>
double energy_centroid(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                       const std::vector<Vec<D>>& positions, const MetricSampler<D>& background,
                       std::vector<int>& ehints, const FunctionalSpec& spec, double gamma) {
    const int ne = mesh.num_elements();
    std::vector<double> part(ne, 0.0);
    std::vector<double> dets(ne);
    parallel_for(ne, [&](int k) {
        const auto& elem = mesh.elements[k];
        Mat<D> E;
        for (int j = 0; j < D; ++j) E.col(j) = positions[elem[j + 1]] - positions[elem[0]];
        const double det = E.determinant();
        dets[k] = det;
        if (det <= mesh.degenerate_tol) return;
        Vec<D> c = Vec<D>::Zero();
        for (int j = 0; j <= D; ++j) c += positions[elem[j]];
        c /= double(D + 1);
        const Mat<D> M = background.sample(c, ehints[k]);
        const Mat<D> J = ref.E_hat * E.inverse();
        part[k] = det / factorial(D) * g_derivatives<D>(J, ref.det_E_hat / det, M, gamma, spec).G;
    });
    double I = 0.0;
    for (int k = 0; k < ne; ++k) {
        if (dets[k] <= mesh.degenerate_tol) throw SingularElementError(k, dets[k]);
        I += part[k];
    }
    return I;
}

/// Nodal metrics re-sampled from the background field at the given positions.
template <int D>
MetricField<D> sample_field(const MetricSampler<D>& background, const std::vector<Vec<D>>& positions,
                            std::vector<int>& hints) {
    MetricField<D> field;
    field.nodal.resize(positions.size());
    parallel_for(static_cast<int>(positions.size()),
                 [&](int i) { field.nodal[i] = background.sample(positions[i], hints[i]); });
    field.m_lower = std::numeric_limits<double>::max();
    field.m_upper = 0.0;
    for (const auto& M : field.nodal) {
        Eigen::SelfAdjointEigenSolver<Mat<D>> es(M);
        field.m_lower = std::min(field.m_lower, es.eigenvalues().minCoeff());
        field.m_upper = std::max(field.m_upper, es.eigenvalues().maxCoeff());
    }
    return field;
}

/// I_h evaluated at trial positions with the given (already re-sampled) nodal
/// metrics; throws SingularElementError on a degenerate trial element.
template <int D>
double energy_at_positions(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                           const std::vector<Vec<D>>& positions, const MetricField<D>& field,
                           const FunctionalSpec& spec, double gamma) {
    double I = 0.0;
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const auto& elem = mesh.elements[k];
        Mat<D> E;
        for (int j = 0; j < D; ++j) E.col(j) = positions[elem[j + 1]] - positions[elem[0]];
        const double det = E.determinant();
        if (det <= mesh.degenerate_tol) throw SingularElementError(k, det);
        Mat<D> M = Mat<D>::Zero();
        for (int j = 0; j <= D; ++j) M += field.nodal[elem[j]];
        M /= double(D + 1);
        const Mat<D> J = ref.E_hat * E.inverse();
        I += det / factorial(D) * g_derivatives<D>(J, ref.det_E_hat / det, M, gamma, spec).G;
    }
    return I;
}

template <int D>
void trajectory_sample(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                       const MetricField<D>& metric, double& min_vol, double& min_alt) {
    min_vol = std::numeric_limits<double>::max();
    min_alt = std::numeric_limits<double>::max();
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const auto geom = element_geometry(mesh, ref, k);
        min_vol = std::min(min_vol, geom.volume);
        min_alt = std::min(min_alt, min_altitude_in_metric(geom, element_average_metric(metric, mesh, k)));
    }
}

}  // namespace detail

template <int D>
struct StepResult {
    bool accepted = false;
    double I_h_new = 0.0;
    int bad_element = -1;  // inverted/degenerate element on geometric rejection
};

/// One forward-Euler trial with the given velocities. Accepted iff no element
/// degenerates and I_h does not increase past `energy_baseline` (frozen gamma).
/// On acceptance the mesh coordinates are updated in place.
template <int D>
StepResult<D> step(SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                   const MetricField<D>& metric, const FunctionalSpec& spec,
                   const VelocityField<D>& velocities, double dt, double gamma,
                   double energy_baseline) {
    std::vector<Vec<D>> trial(mesh.vertices);
    for (int i = 0; i < mesh.num_vertices(); ++i) trial[i] += dt * velocities[i];
    detail::snap_to_boundary(mesh, trial);

    StepResult<D> res;
    if (!detail::trial_valid(mesh, trial, res.bad_element)) return res;

    // the trial energy uses the same per-element metric linearization whose
    // exact gradient drives the velocities; a small enough step along the
    // (projected, positively scaled) descent direction always decreases it
    try {
        res.I_h_new = energy_at_displaced(mesh, ref, metric, spec, gamma, trial);
    } catch (const std::exception&) {
        return res;  // linearized metric left the SPD cone: reject
    }
    if (!(res.I_h_new <= energy_baseline)) return res;

    mesh.vertices = std::move(trial);
    res.accepted = true;
    return res;
}

namespace detail {

/// Natural scale of I_h for a given metric: sigma_h * gamma_h^s with s the
/// gamma-power of G at an aligned, equidistributed mesh. Dividing by it makes
/// energies comparable across metrics of different sharpness.
inline double energy_scale(double sigma, double gamma, const FunctionalSpec& spec, int d) {
    const double s =
        spec.kind == FunctionalSpec::Kind::New ? 2.0 * spec.p : 0.5 * d * spec.p;
    return std::max(sigma * std::pow(gamma, s), 1e-300);
}

}  // namespace detail

template <int D>
using MetricRefreshFn = std::function<MetricField<D>(const SimplicialMesh<D>&)>;

template <int D>
struct IntegrateResult {
    SimplicialMesh<D> mesh;
    MetricField<D> metric;
    TrajectoryRecord record;
};

/// Integrates the mesh equation to cfg.t_final with adaptive step control.
///
/// The metric is treated as a field frozen on a background snapshot and is
/// re-sampled at the moving vertex positions, so the acceptance energy is a
/// well-defined function of the coordinates alone. A rebuilt metric (Hessian
/// recovery on the current mesh) is adopted whenever it does not raise the
/// energy. Accepted energies are therefore nonincreasing by construction; the
/// step is rejected and dt backtracked whenever an element would invert or the
/// energy rise, and the run ends early once the energy stalls.
template <int D>
IntegrateResult<D> integrate(SimplicialMesh<D> mesh, MetricField<D> metric,
                             const FunctionalSpec& spec, const MmpdeConfig& cfg,
                             const MetricRefreshFn<D>& refresh = nullptr) {
    const auto ref = build_reference_element<D>();
    mesh.refresh_degeneracy_tol();

    auto background = std::make_shared<MetricSampler<D>>(mesh, metric.nodal);
    std::vector<int> ehints(mesh.num_elements());
    std::vector<int> vhints(mesh.num_vertices());
    const auto reset_hints = [&] {
        std::iota(ehints.begin(), ehints.end(), 0);
        for (int i = 0; i < mesh.num_vertices(); ++i)
            vhints[i] = mesh.vertex_patches[i].empty() ? 0 : mesh.vertex_patches[i].front();
    };
    reset_hints();

    double sigma = sigma_h(mesh, ref, metric);
    double gamma = gamma_h(sigma, mesh.num_elements(), D);
    // All recorded/compared energies are normalized by the metric's natural
    // scale so they stay comparable across metric rebuilds; the normalizer is
    // frozen together with gamma per background snapshot, so within a snapshot
    // monotonicity of the normalized energy is monotonicity of I_h itself.
    double scale_cur = detail::energy_scale(sigma, gamma, spec, D);
    double e_cur =
        detail::energy_centroid(mesh, ref, mesh.vertices, *background, ehints, spec, gamma) /
        scale_cur;

    TrajectoryRecord rec;
    double min_vol, min_alt;
    detail::trajectory_sample(mesh, ref, metric, min_vol, min_alt);
    rec.times.push_back(0.0);
    rec.energies.push_back(e_cur);
    rec.min_volume.push_back(min_vol);
    rec.min_metric_altitude.push_back(min_alt);
    rec.accepted_so_far.push_back(0);

    double t = 0.0;
    double dt = cfg.dt_init;
    const double t_eps = 1e-12 * cfg.t_final;
    const bool refreshing = cfg.metric_refresh && refresh;
    int stalled = 0;
    while (t < cfg.t_final - t_eps && rec.accepted < cfg.max_steps) {
        double dt_try = std::min(dt, cfg.t_final - t);
        // dt doubles as the line-search state: dt/dt_max is the fraction of
        // the full preconditioned displacement field taken this step
        const auto disp = detail::precondition_displacements_centroid(
            mesh, ref, *background, ehints, spec, gamma,
            assemble_velocities_centroid<D>(mesh, ref, *background, ehints, metric, spec, cfg,
                                            gamma),
            cfg.max_displacement_frac);
        bool critical = false;
        int bad_element = -1;
        while (true) {
            const double scale = dt_try / cfg.dt_max;
            std::vector<Vec<D>> trial(mesh.vertices);
            for (int i = 0; i < mesh.num_vertices(); ++i) trial[i] += scale * disp[i];
            detail::snap_to_boundary(mesh, trial);
            bad_element = -1;
            if (detail::trial_valid(mesh, trial, bad_element)) {
                std::vector<int> trial_ehints = ehints;
                double e_trial = std::numeric_limits<double>::infinity();
                try {
                    e_trial = detail::energy_centroid(mesh, ref, trial, *background, trial_ehints,
                                                      spec, gamma) /
                              scale_cur;
                } catch (const SingularElementError& err) {
                    bad_element = err.element();
                }
                if (e_trial <= e_cur) {
                    mesh.vertices = std::move(trial);
                    ehints = std::move(trial_ehints);
                    metric = detail::sample_field(*background, mesh.vertices, vhints);
                    stalled = (e_cur - e_trial <=
                               cfg.convergence_rel_tol * std::max(std::abs(e_cur), 1e-300))
                                  ? stalled + 1
                                  : 0;
                    e_cur = e_trial;
                    break;
                }
            }
            ++rec.rejected;
            dt_try *= cfg.energy_backtrack_factor;
            if (dt_try < cfg.dt_min) {
                if (bad_element < 0) {
                    // no energy-decreasing step exists at any usable dt: the
                    // mesh sits at a discrete critical point of the flow
                    critical = true;
                    break;
                }
                throw StagnationError("mmpde stagnated at t = " + std::to_string(t) +
                                          " (element " + std::to_string(bad_element) +
                                          " degenerates at every step size)",
                                      bad_element, -1);
            }
        }
        if (critical) {
            rec.converged = true;
            break;
        }
        t += dt_try;
        ++rec.accepted;
        dt = std::min(dt_try * cfg.dt_growth, cfg.dt_max);
        mesh.refresh_degeneracy_tol();

        if (refreshing) {
            MetricField<D> rebuilt = refresh(mesh);
            const double rebuilt_sigma = sigma_h(mesh, ref, rebuilt);
            const double rebuilt_gamma = gamma_h(rebuilt_sigma, mesh.num_elements(), D);
            const double rebuilt_scale = detail::energy_scale(rebuilt_sigma, rebuilt_gamma, spec, D);
            const double e_rebuilt =
                energy(mesh, ref, rebuilt, spec, rebuilt_gamma).I_h / rebuilt_scale;
            if (e_rebuilt <= e_cur) {
                background = std::make_shared<MetricSampler<D>>(mesh, rebuilt.nodal);
                metric = std::move(rebuilt);
                gamma = rebuilt_gamma;
                scale_cur = rebuilt_scale;
                e_cur = e_rebuilt;
                reset_hints();
            }
        }

        detail::trajectory_sample(mesh, ref, metric, min_vol, min_alt);
        rec.times.push_back(t);
        rec.energies.push_back(e_cur);
        rec.min_volume.push_back(min_vol);
        rec.min_metric_altitude.push_back(min_alt);
        rec.accepted_so_far.push_back(rec.accepted);
        if (stalled >= cfg.convergence_window) {
            rec.converged = true;
            break;
        }
    }
    return {std::move(mesh), std::move(metric), std::move(rec)};
}

/// CSV export with header "t,I_h,min_vol,min_alt_M,accepted".
inline void write_trajectory_csv(std::ostream& out, const TrajectoryRecord& rec) {
    out << "t,I_h,min_vol,min_alt_M,accepted\n";
    out << std::setprecision(17);
    for (size_t i = 0; i < rec.times.size(); ++i)
        out << rec.times[i] << ',' << rec.energies[i] << ',' << rec.min_volume[i] << ','
            << rec.min_metric_altitude[i] << ',' << rec.accepted_so_far[i] << '\n';
}

}  // namespace meshflow
