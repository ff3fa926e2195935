#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

/// Simplicial mesh storage and per-element geometric kernels (edge matrices,
/// Jacobians, linear basis gradients, metric altitudes).
namespace meshflow {

template <int D>
using Vec = Eigen::Matrix<double, D, 1>;
template <int D>
using Mat = Eigen::Matrix<double, D, D>;
template <int D>
using RowVec = Eigen::Matrix<double, 1, D>;

constexpr double factorial(int n) { return n <= 1 ? 1.0 : n * factorial(n - 1); }

class SingularElementError : public std::runtime_error {
public:
    SingularElementError(int element, double det)
        : std::runtime_error("degenerate element " + std::to_string(element) +
                             " (det(E_K) = " + std::to_string(det) + ")"),
          element_(element), det_(det) {}
    int element() const { return element_; }
    double det() const { return det_; }

private:
    int element_;
    double det_;
};

enum class VertexClass : std::uint8_t { Interior = 0, Boundary = 1, Corner = 2 };

struct BoundaryTag {
    VertexClass cls = VertexClass::Interior;
    int segment = -1;  // polygon edge index for Boundary vertices
};

/// Straight boundary segment: point + unit tangent, parameter range [0, length].
template <int D>
struct BoundarySegment {
    Vec<D> origin;
    Vec<D> tangent;  // unit
    double length = 0.0;
};

template <int D>
struct SimplicialMesh {
    static constexpr int dim = D;
    static constexpr int verts_per_element = D + 1;

    std::vector<Vec<D>> vertices;
    std::vector<std::array<int, D + 1>> elements;
    std::vector<BoundaryTag> boundary;
    std::vector<std::vector<int>> vertex_patches;  // omega_i
    std::vector<BoundarySegment<D>> segments;      // geometry behind Boundary tags
    double degenerate_tol = 0.0;                   // scale-relative singular guard

    int num_vertices() const { return static_cast<int>(vertices.size()); }
    int num_elements() const { return static_cast<int>(elements.size()); }

    void build_patches() {
        vertex_patches.assign(vertices.size(), {});
        for (int k = 0; k < num_elements(); ++k)
            for (int v : elements[k]) vertex_patches[v].push_back(k);
    }

    /// det(E_K) <= 1e-14 * (bounding-box volume) is treated as singular.
    void refresh_degeneracy_tol() {
        if (vertices.empty()) { degenerate_tol = 0.0; return; }
        Vec<D> lo = vertices[0], hi = vertices[0];
        for (const auto& x : vertices) {
            lo = lo.cwiseMin(x);
            hi = hi.cwiseMax(x);
        }
        degenerate_tol = 1e-14 * (hi - lo).prod();
    }
};

template <int D>
struct ReferenceElement {
    std::array<Vec<D>, D + 1> xi;
    Mat<D> E_hat;
    Mat<D> E_hat_inv;
    double det_E_hat = 0.0;
};

/// Equilateral simplex with unit volume, so det(E_hat) = d!.
template <int D>
ReferenceElement<D> build_reference_element() {
    static_assert(D == 2 || D == 3, "unsupported dimension");
    ReferenceElement<D> ref;
    if constexpr (D == 2) {
        const double s = 2.0 / std::pow(3.0, 0.25);  // side of the area-1 equilateral triangle
        ref.xi[0] << 0.0, 0.0;
        ref.xi[1] << s, 0.0;
        ref.xi[2] << 0.5 * s, 0.5 * std::sqrt(3.0) * s;
    } else {
        const double a = std::cbrt(6.0 * std::sqrt(2.0));  // side of the volume-1 regular tet
        ref.xi[0] << 0.0, 0.0, 0.0;
        ref.xi[1] << a, 0.0, 0.0;
        ref.xi[2] << 0.5 * a, 0.5 * std::sqrt(3.0) * a, 0.0;
        ref.xi[3] << 0.5 * a, a * std::sqrt(3.0) / 6.0, a * std::sqrt(2.0 / 3.0);
    }
    for (int j = 0; j < D; ++j) ref.E_hat.col(j) = ref.xi[j + 1] - ref.xi[0];
    ref.det_E_hat = ref.E_hat.determinant();
    ref.E_hat_inv = ref.E_hat.inverse();
    return ref;
}

template <int D>
struct ElementGeometry {
    Mat<D> E_K;
    double det_E_K = 0.0;
    double volume = 0.0;           // |K| = det(E_K)/d!
    Mat<D> FK_prime;               // E_K * E_hat^-1
    Mat<D> J;                      // (F_K')^-1 = E_hat * E_K^-1
    double det_J = 0.0;            // det(E_hat)/det(E_K)
    Mat<D> E_K_inv;
    std::array<RowVec<D>, D + 1> basis_gradients;
};

template <int D>
ElementGeometry<D> element_geometry(const SimplicialMesh<D>& mesh,
                                    const ReferenceElement<D>& ref, int k) {
    const auto& elem = mesh.elements[k];
    ElementGeometry<D> g;
    for (int j = 0; j < D; ++j)
        g.E_K.col(j) = mesh.vertices[elem[j + 1]] - mesh.vertices[elem[0]];
    g.det_E_K = g.E_K.determinant();
    if (g.det_E_K <= mesh.degenerate_tol) throw SingularElementError(k, g.det_E_K);
    g.volume = g.det_E_K / factorial(D);
    g.E_K_inv = g.E_K.inverse();
    g.FK_prime = g.E_K * ref.E_hat_inv;
    g.J = ref.E_hat * g.E_K_inv;
    g.det_J = ref.det_E_hat / g.det_E_K;
    g.basis_gradients[0].setZero();
    for (int j = 1; j <= D; ++j) {
        g.basis_gradients[j] = g.E_K_inv.row(j - 1);
        g.basis_gradients[0] -= g.basis_gradients[j];
    }
    return g;
}

/// Measure of the facet opposite local vertex `m`, in the norm induced by M.
template <int D>
double facet_measure_in_metric(const ElementGeometry<D>& geom, const Mat<D>& M, int m) {
    // vertex 0 sits at the origin of the edge-vector frame; vertex j>0 at column j-1
    Eigen::Matrix<double, D, D - 1> span;
    int base = (m == 0) ? 1 : 0;
    Vec<D> xb = (base == 0) ? Vec<D>::Zero() : Vec<D>(geom.E_K.col(base - 1));
    int c = 0;
    for (int j = 0; j <= D; ++j) {
        if (j == m || j == base) continue;
        Vec<D> xj = (j == 0) ? Vec<D>::Zero() : Vec<D>(geom.E_K.col(j - 1));
        span.col(c++) = xj - xb;
    }
    Eigen::Matrix<double, D - 1, D - 1> gram = span.transpose() * M * span;
    return std::sqrt(gram.determinant()) / factorial(D - 1);
}

/// Minimum altitude of the element measured in the metric M:
/// d * |K|_M / (largest facet measure), |K|_M = |K| det(M)^(1/2).
template <int D>
double min_altitude_in_metric(const ElementGeometry<D>& geom, const Mat<D>& M) {
    Eigen::SelfAdjointEigenSolver<Mat<D>> es(M);
    if (es.eigenvalues().minCoeff() <= 0.0)
        throw std::invalid_argument("min_altitude_in_metric: metric is not SPD");
    const double vol_m = geom.volume * std::sqrt(M.determinant());
    double max_facet = 0.0;
    for (int m = 0; m <= D; ++m)
        max_facet = std::max(max_facet, facet_measure_in_metric(geom, M, m));
    return D * vol_m / max_facet;
}

/// Reorder element vertices where needed so every det(E_K) > 0.
template <int D>
void enforce_positive_orientation(SimplicialMesh<D>& mesh) {
    for (auto& elem : mesh.elements) {
        Mat<D> E;
        for (int j = 0; j < D; ++j) E.col(j) = mesh.vertices[elem[j + 1]] - mesh.vertices[elem[0]];
        if (E.determinant() < 0.0) std::swap(elem[D - 1], elem[D]);
    }
}

template <int D>
void validate_connectivity(const SimplicialMesh<D>& mesh) {
    for (int k = 0; k < mesh.num_elements(); ++k) {
        const auto& e = mesh.elements[k];
        for (int a = 0; a <= D; ++a) {
            if (e[a] < 0 || e[a] >= mesh.num_vertices())
                throw std::runtime_error("element " + std::to_string(k) + ": vertex index out of range");
            for (int b = a + 1; b <= D; ++b)
                if (e[a] == e[b])
                    throw std::runtime_error("element " + std::to_string(k) + ": repeated vertex index");
        }
    }
}

// ---------------------------------------------------------------------------
// Polygonal domains (2D): boundary classification and segment geometry.

struct Polygon {
    std::vector<Eigen::Vector2d> corners;  // counterclockwise

    static Polygon unit_square() {
        Polygon p;
        p.corners = {{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}};
        return p;
    }
    int num_edges() const { return static_cast<int>(corners.size()); }
};

/// Tags each vertex as Corner (polygon vertex), Boundary (on a polygon edge)
/// or Interior, and records the segment geometry used for boundary sliding.
inline void classify_boundary(SimplicialMesh<2>& mesh, const Polygon& poly,
                              double abs_tol = 1e-12) {
    const int n = poly.num_edges();
    mesh.segments.clear();
    for (int s = 0; s < n; ++s) {
        BoundarySegment<2> seg;
        seg.origin = poly.corners[s];
        Eigen::Vector2d d = poly.corners[(s + 1) % n] - poly.corners[s];
        seg.length = d.norm();
        seg.tangent = d / seg.length;
        mesh.segments.push_back(seg);
    }
    mesh.boundary.assign(mesh.vertices.size(), {});
    for (int i = 0; i < mesh.num_vertices(); ++i) {
        const Eigen::Vector2d& x = mesh.vertices[i];
        BoundaryTag tag;
        for (int s = 0; s < n && tag.cls != VertexClass::Corner; ++s) {
            if ((x - poly.corners[s]).norm() <= abs_tol) {
                tag = {VertexClass::Corner, -1};
                continue;
            }
            const auto& seg = mesh.segments[s];
            Eigen::Vector2d r = x - seg.origin;
            double t = r.dot(seg.tangent);
            double dist = std::abs(r.x() * seg.tangent.y() - r.y() * seg.tangent.x());
            if (dist <= abs_tol && t > 0.0 && t < seg.length)
                tag = {VertexClass::Boundary, s};
        }
        mesh.boundary[i] = tag;
    }
}

}  // namespace meshflow
