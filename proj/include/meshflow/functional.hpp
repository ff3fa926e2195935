#pragma once

#include "meshflow/geometry.hpp"
#include "meshflow/metric.hpp"
#include "meshflow/parallel.hpp"

#include <optional>

/// Meshing functionals built from the equidistribution and alignment
/// conditions: the theta-averaged form and the single-condition form, their
/// integrand derivative quadruples, and the coercivity/trajectory constants.
namespace meshflow {

struct FunctionalSpec {
    enum class Kind { Existing, New };
    Kind kind = Kind::New;
    double theta = 1.0 / 3.0;  // Existing only
    double p = 1.0;

    static FunctionalSpec existing(double theta = 1.0 / 3.0, double p = 1.5) {
        return {Kind::Existing, theta, p};
    }
    static FunctionalSpec combined(double p = 1.0) { return {Kind::New, 0.0, p}; }

    /// Parameter regime backed by the coercivity/polyconvexity theory.
    bool theory_supported(int d) const {
        if (kind == Kind::Existing)
            return theta > 0.0 && theta <= 0.5 && p >= 1.0 && d * p >= 2.0;
        return p > 1.0;
    }
};

/// Scalar-by-matrix derivatives follow the trace convention:
/// dG = tr(dG_dJ * dJ) + dG_ddetJ * d(detJ) + tr(dG_dM * dM).
template <int D>
struct GDerivatives {
    double G = 0.0;
    Mat<D> dG_dJ = Mat<D>::Zero();
    double dG_ddetJ = 0.0;
    Mat<D> dG_dM = Mat<D>::Zero();
};

template <int D>
struct EnergyBreakdown {
    double I_h = 0.0;
    double I_eq = 0.0;   // Existing kind only
    double I_ali = 0.0;  // Existing kind only
    double sigma_h = 0.0;
    double gamma_h = 0.0;
    std::vector<double> per_element;
};

namespace detail {

template <int D>
void check_spd(const Mat<D>& M, const char* who) {
    Eigen::SelfAdjointEigenSolver<Mat<D>> es(M);
    if (es.eigenvalues().minCoeff() <= 0.0)
        throw std::invalid_argument(std::string(who) + ": metric is not SPD");
}

template <int D>
void check_det_consistency(const Mat<D>& J, double detJ) {
    const double d = J.determinant();
    if (std::abs(d - detJ) > 1e-10 * std::max(std::abs(d), std::abs(detJ)))
        throw std::invalid_argument("detJ inconsistent with det(J)");
}

}  // namespace detail

/// sigma_h = sum_K |K| det(M_K)^(1/2); the mesh volume measured in the metric.
template <int D>
double sigma_h(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
               const MetricField<D>& metric) {
    double s = 0.0;
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const Mat<D> M = element_average_metric(metric, mesh, k);
        s += element_geometry(mesh, ref, k).volume * std::sqrt(M.determinant());
    }
    return s;
}

/// gamma_h = (sigma_h / N)^(-2/d); the target eigenvalue of J M^-1 J^T.
inline double gamma_h(double sigma, int n_elements, int d) {
    return std::pow(sigma / n_elements, -2.0 / d);
}

/// Integrand of the theta-averaged functional:
/// G = theta det(M)^(1/2) tr(J M^-1 J^T)^(dp/2)
///   + (1-2 theta) d^(dp/2) det(M)^(1/2) (det(J) det(M)^(-1/2))^p.
template <int D>
GDerivatives<D> g_existing(const Mat<D>& J, double detJ, const Mat<D>& M,
                           const FunctionalSpec& spec) {
    detail::check_spd<D>(M, "g_existing");
    detail::check_det_consistency<D>(J, detJ);
    const double p = spec.p, theta = spec.theta;
    const double dp2 = D * p / 2.0;
    const Mat<D> Minv = M.inverse();
    const double sdet = std::sqrt(M.determinant());
    const Mat<D> JMiJt = J * Minv * J.transpose();
    const double tr = JMiJt.trace();
    const double dpow = std::pow(double(D), dp2);
    const double eqterm = std::pow(detJ / sdet, p);

    GDerivatives<D> g;
    g.G = theta * sdet * std::pow(tr, dp2) + (1.0 - 2.0 * theta) * dpow * sdet * eqterm;
    g.dG_dJ = D * p * theta * sdet * std::pow(tr, dp2 - 1.0) * Minv * J.transpose();
    g.dG_ddetJ = p * (1.0 - 2.0 * theta) * dpow * std::pow(M.determinant(), (1.0 - p) / 2.0) *
                 std::pow(detJ, p - 1.0);
    g.dG_dM = -theta * D * p / 2.0 * sdet * std::pow(tr, dp2 - 1.0) *
                  (Minv * J.transpose() * J * Minv) +
              theta / 2.0 * sdet * std::pow(tr, dp2) * Minv +
              (1.0 - 2.0 * theta) * (1.0 - p) * dpow / 2.0 * sdet * eqterm * Minv;
    return g;
}

/// Integrand of the single-condition functional:
/// G = det(M)^(1/2) || J M^-1 J^T - gamma_h I ||_F^(2p), with sigma_h (hence
/// gamma_h) held constant under differentiation.
template <int D>
GDerivatives<D> g_new(const Mat<D>& J, double detJ, const Mat<D>& M, double gamma,
                      const FunctionalSpec& spec) {
    detail::check_spd<D>(M, "g_new");
    detail::check_det_consistency<D>(J, detJ);
    if (gamma <= 0.0) throw std::invalid_argument("g_new: gamma_h must be positive");
    const double p = spec.p;
    const Mat<D> Minv = M.inverse();
    const double sdet = std::sqrt(M.determinant());
    const Mat<D> A = J * Minv * J.transpose() - gamma * Mat<D>::Identity();
    const double nrm = A.norm();  // Frobenius

    GDerivatives<D> g;
    g.G = sdet * std::pow(nrm, 2.0 * p);
    // ||A||^(2(p-1)) with the p=1, A=0 corner: prefactor 1, trailing factor 0.
    const double prefac = (nrm == 0.0 && p == 1.0) ? 1.0 : std::pow(nrm, 2.0 * (p - 1.0));
    g.dG_dJ = 4.0 * p * prefac * sdet * Minv * J.transpose() * A;
    g.dG_ddetJ = 0.0;
    g.dG_dM = 0.5 * g.G * Minv - 0.5 * g.dG_dJ * J * Minv;
    return g;
}

template <int D>
GDerivatives<D> g_derivatives(const Mat<D>& J, double detJ, const Mat<D>& M, double gamma,
                              const FunctionalSpec& spec) {
    return spec.kind == FunctionalSpec::Kind::Existing ? g_existing<D>(J, detJ, M, spec)
                                                       : g_new<D>(J, detJ, M, gamma, spec);
}

/// I_h = sum_K |K| G(J_K, det J_K, M_K). For the Existing kind the
/// equidistribution/alignment split is also reported.
template <int D>
EnergyBreakdown<D> energy(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                          const MetricField<D>& metric, const FunctionalSpec& spec,
                          std::optional<double> frozen_gamma = std::nullopt) {
    EnergyBreakdown<D> out;
    out.sigma_h = sigma_h(mesh, ref, metric);
    out.gamma_h = frozen_gamma ? *frozen_gamma : gamma_h(out.sigma_h, mesh.num_elements(), D);
    out.per_element.resize(mesh.num_elements());
    const double dp2 = D * spec.p / 2.0;
    const double dpow = std::pow(double(D), dp2);
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const auto geom = element_geometry(mesh, ref, k);
        const Mat<D> M = element_average_metric(metric, mesh, k);
        const auto g = g_derivatives<D>(geom.J, geom.det_J, M, out.gamma_h, spec);
        out.per_element[k] = geom.volume * g.G;
        out.I_h += out.per_element[k];
        if (spec.kind == FunctionalSpec::Kind::Existing) {
            const double sdet = std::sqrt(M.determinant());
            const double w = geom.volume * sdet;
            const double eqterm = dpow * std::pow(geom.det_J / sdet, spec.p);
            const double tr = (geom.J * M.inverse() * geom.J.transpose()).trace();
            out.I_eq += w * eqterm;
            out.I_ali += w * (std::pow(tr, dp2) - eqterm);
        }
    }
    return out;
}

/// Coercivity constants of G >= alpha ||J||_F^(4p) - beta:
/// alpha = 2^(1-2p) m_lower^(d/2) / (m_upper^(2p) d^(2p)),
/// beta  = m_lower^(d/2) (gamma_h^2 d)^p.
struct CoercivityConstants {
    double alpha = 0.0;
    double beta = 0.0;
};

inline CoercivityConstants coercivity_constants(int d, double p, double m_lower, double m_upper,
                                                double gamma) {
    CoercivityConstants c;
    c.alpha = std::pow(2.0, 1.0 - 2.0 * p) * std::pow(m_lower, d / 2.0) /
              (std::pow(m_upper, 2.0 * p) * std::pow(double(d), 2.0 * p));
    c.beta = std::pow(m_lower, d / 2.0) * std::pow(gamma * gamma * d, p);
    return c;
}

/// Trajectory lower bounds on the metric altitude and element volume:
/// C1 = (2^(6p) d!^(4p/d) alpha / (d^(4p) (d+1)^(4p - 2p/d) (beta |Omega| + I_h0)))^(1/(4p-d)),
/// C2 = C1^d / d!,
/// a_{K,M} >= C1 m_upper^(-d/(2(4p-d))) N^(-4p/(d(4p-d))),
/// |K|     >= C2 m_upper^(-d^2/(2(4p-d)) - d/2) N^(-4p/(4p-d)).
struct TrajectoryBounds {
    double C1 = 0.0;
    double C2 = 0.0;
    double altitude_bound = 0.0;
    double volume_bound = 0.0;
};

inline TrajectoryBounds corollary_bounds(int d, double p, double m_upper, int N, double I_h_initial,
                                         double domain_volume, double alpha, double beta) {
    if (4.0 * p <= d) throw std::invalid_argument("corollary_bounds requires 4p > d");
    TrajectoryBounds b;
    const double q = 4.0 * p - d;
    const double numer = std::pow(2.0, 6.0 * p) * std::pow(factorial(d), 4.0 * p / d) * alpha;
    const double denom = std::pow(double(d), 4.0 * p) *
                         std::pow(double(d + 1), 4.0 * p - 2.0 * p / d) *
                         (beta * domain_volume + I_h_initial);
    b.C1 = std::pow(numer / denom, 1.0 / q);
    b.C2 = std::pow(b.C1, d) / factorial(d);
    b.altitude_bound =
        b.C1 * std::pow(m_upper, -d / (2.0 * q)) * std::pow(double(N), -4.0 * p / (d * q));
    b.volume_bound = b.C2 * std::pow(m_upper, -d * d / (2.0 * q) - d / 2.0) *
                     std::pow(double(N), -4.0 * p / q);
    return b;
}

}  // namespace meshflow
