#pragma once

#include "meshflow/functional.hpp"
#include "meshflow/mmpde.hpp"

#include <functional>

/// Mesh quality measures, L2 interpolation error, and trajectory bound audits.
namespace meshflow {

template <int D>
struct QualityReport {
    double Q_eq = 0.0;
    double Q_ali = 0.0;
    double Q_geo = 0.0;
    std::vector<double> per_element_eq;
    std::vector<double> per_element_ali;
    std::vector<double> per_element_geo;
    double l2_error = 0.0;  // filled separately
    int N = 0;
};

/// Q_eq,K  = |K| det(M_K)^(1/2) / (sigma_h/N)
/// Q_ali,K = tr(F'^T M_K F') / (d det(F'^T M_K F')^(1/d))
/// Q_geo,K = the same with M = I; aggregates are root-mean-squares over elements.
template <int D>
QualityReport<D> quality_measures(const SimplicialMesh<D>& mesh, const ReferenceElement<D>& ref,
                                  const MetricField<D>& metric) {
    QualityReport<D> q;
    q.N = mesh.num_elements();
    q.per_element_eq.resize(q.N);
    q.per_element_ali.resize(q.N);
    q.per_element_geo.resize(q.N);
    const double sigma = sigma_h(mesh, ref, metric);
    double s_eq = 0.0, s_ali = 0.0, s_geo = 0.0;
    for (int k = 0; k < q.N; ++k) {
        const auto geom = element_geometry(mesh, ref, k);
        const Mat<D> M = element_average_metric(metric, mesh, k);
        const Mat<D> FtMF = geom.FK_prime.transpose() * M * geom.FK_prime;
        const Mat<D> FtF = geom.FK_prime.transpose() * geom.FK_prime;
        q.per_element_eq[k] = geom.volume * std::sqrt(M.determinant()) / (sigma / q.N);
        q.per_element_ali[k] = FtMF.trace() / (D * std::pow(FtMF.determinant(), 1.0 / D));
        q.per_element_geo[k] = FtF.trace() / (D * std::pow(FtF.determinant(), 1.0 / D));
        s_eq += q.per_element_eq[k] * q.per_element_eq[k];
        s_ali += q.per_element_ali[k] * q.per_element_ali[k];
        s_geo += q.per_element_geo[k] * q.per_element_geo[k];
    }
    q.Q_eq = std::sqrt(s_eq / q.N);
    q.Q_ali = std::sqrt(s_ali / q.N);
    q.Q_geo = std::sqrt(s_geo / q.N);
    return q;
}

/// Symmetric 6-point degree-4 triangle rule (barycentric points, area weights).
struct TriangleQuadrature {
    static constexpr int n = 6;
    // (l1, l2, l3, w); weights sum to 1
    static const std::array<std::array<double, 4>, 6>& points() {
        static const std::array<std::array<double, 4>, 6> pts = {{
            {0.108103018168070, 0.445948490915965, 0.445948490915965, 0.223381589678011},
            {0.445948490915965, 0.108103018168070, 0.445948490915965, 0.223381589678011},
            {0.445948490915965, 0.445948490915965, 0.108103018168070, 0.223381589678011},
            {0.816847572980459, 0.091576213509771, 0.091576213509771, 0.109951743655322},
            {0.091576213509771, 0.816847572980459, 0.091576213509771, 0.109951743655322},
            {0.091576213509771, 0.091576213509771, 0.816847572980459, 0.109951743655322},
        }};
        return pts;
    }
};

/// || Pi_h u - u ||_{L2}, with Pi_h the vertex interpolant, per-element
/// degree-4 quadrature.
inline double l2_interpolation_error(const SimplicialMesh<2>& mesh,
                                     const std::function<double(const Eigen::Vector2d&)>& u) {
    const auto ref = build_reference_element<2>();
    double err2 = 0.0;
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const auto& e = mesh.elements[k];
        const Eigen::Vector2d x0 = mesh.vertices[e[0]], x1 = mesh.vertices[e[1]],
                              x2 = mesh.vertices[e[2]];
        const double u0 = u(x0), u1 = u(x1), u2 = u(x2);
        const double area = element_geometry(mesh, ref, k).volume;
        double s = 0.0;
        for (const auto& q : TriangleQuadrature::points()) {
            const Eigen::Vector2d xq = q[0] * x0 + q[1] * x1 + q[2] * x2;
            const double diff = q[0] * u0 + q[1] * u1 + q[2] * u2 - u(xq);
            s += q[3] * diff * diff;
        }
        err2 += area * s;
    }
    return std::sqrt(err2);
}

struct BoundAudit {
    bool energy_monotone = true;
    std::vector<size_t> energy_uptick_indices;   // i where I_h(t_i) > I_h(t_{i-1})
    std::vector<size_t> altitude_violations;     // indices below the altitude bound
    std::vector<size_t> volume_violations;       // indices below the volume bound
    double plateau_ratio = 0.0;  // |I(t_f) - I(0.8 t_f)| / |I(t_f)|
    bool ok() const {
        return energy_monotone && altitude_violations.empty() && volume_violations.empty();
    }
};

/// Checks a recorded trajectory against the theoretical lower bounds and the
/// energy-decrease contract. Round-off slack of 1e-12 on the comparisons.
inline BoundAudit bound_audit(const TrajectoryRecord& rec, const TrajectoryBounds& bounds) {
    BoundAudit audit;
    const double slack = 1e-12;
    for (size_t i = 0; i < rec.times.size(); ++i) {
        if (i > 0 && rec.energies[i] > rec.energies[i - 1] * (1.0 + slack) + slack) {
            audit.energy_monotone = false;
            audit.energy_uptick_indices.push_back(i);
        }
        if (rec.min_metric_altitude[i] < bounds.altitude_bound - slack)
            audit.altitude_violations.push_back(i);
        if (rec.min_volume[i] < bounds.volume_bound - slack)
            audit.volume_violations.push_back(i);
    }
    if (!rec.times.empty()) {
        const double t_final = rec.times.back();
        size_t j = 0;
        while (j + 1 < rec.times.size() && rec.times[j] < 0.8 * t_final) ++j;
        audit.plateau_ratio =
            std::abs(rec.energies.back() - rec.energies[j]) / std::abs(rec.energies.back());
    }
    return audit;
}

/// CSV row matching the quality table layout "functional,N,Q_geo,Q_eq,Q_ali,error".
template <int D>
void write_quality_csv(std::ostream& out, const std::string& functional_name,
                       const QualityReport<D>& q, bool header = true) {
    if (header) out << "functional,N,Q_geo,Q_eq,Q_ali,error\n";
    out << functional_name << ',' << q.N << ',' << std::setprecision(6) << q.Q_geo << ','
        << q.Q_eq << ',' << q.Q_ali << ',' << q.l2_error << '\n';
}

}  // namespace meshflow
