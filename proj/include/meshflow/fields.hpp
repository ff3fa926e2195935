#pragma once

#include "meshflow/geometry.hpp"

#include <functional>
#include <string>

/// Example adaptation targets on the unit square and the initial mesh builder.
namespace meshflow {

using ScalarField = std::function<double(const Eigen::Vector2d&)>;

/// tanh interface along y = 0.5 + 0.25 sin(2 pi x), steepness `c`.
inline ScalarField sine_wave_field(double c) {
    return [c](const Eigen::Vector2d& x) {
        return std::tanh(-c * (x.y() - 0.5 - 0.25 * std::sin(2.0 * M_PI * x.x())));
    };
}

/// Five-circle level-set sum on the rescaled coordinates X = -2+4x, Y = -2+4y.
inline ScalarField five_spheres_field() {
    return [](const Eigen::Vector2d& x) {
        const double X = -2.0 + 4.0 * x.x();
        const double Y = -2.0 + 4.0 * x.y();
        auto ring = [](double cx, double cy, double X, double Y) {
            return std::tanh(30.0 * ((X - cx) * (X - cx) + (Y - cy) * (Y - cy) - 0.125));
        };
        return ring(0.0, 0.0, X, Y) + ring(0.5, 0.5, X, Y) + ring(0.5, -0.5, X, Y) +
               ring(-0.5, 0.5, X, Y) + ring(-0.5, -0.5, X, Y);
    };
}

inline ScalarField example_field(const std::string& name) {
    if (name == "sine_wave_30") return sine_wave_field(30.0);
    if (name == "sine_wave_100") return sine_wave_field(100.0);
    if (name == "five_spheres") return five_spheres_field();
    throw std::invalid_argument("unknown example field: " + name);
}

/// n x n uniform grid on the unit square, each cell split into two triangles
/// along the same diagonal; N = 2 n^2 elements.
inline SimplicialMesh<2> uniform_square_mesh(int n) {
    if (n < 1) throw std::invalid_argument("grid must be >= 1");
    SimplicialMesh<2> mesh;
    const double h = 1.0 / n;
    for (int j = 0; j <= n; ++j)
        for (int i = 0; i <= n; ++i) mesh.vertices.push_back({i * h, j * h});
    auto id = [n](int i, int j) { return j * (n + 1) + i; };
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            mesh.elements.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
            mesh.elements.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
        }
    classify_boundary(mesh, Polygon::unit_square());
    mesh.build_patches();
    mesh.refresh_degeneracy_tol();
    return mesh;
}

template <int D>
std::vector<double> sample_nodal(const SimplicialMesh<D>& mesh, const ScalarField& u) {
    std::vector<double> values(mesh.vertices.size());
    for (size_t i = 0; i < mesh.vertices.size(); ++i) values[i] = u(mesh.vertices[i]);
    return values;
}

}  // namespace meshflow
