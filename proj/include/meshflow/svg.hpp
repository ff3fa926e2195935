#pragma once

#include "meshflow/geometry.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <string>

/// Deterministic SVG wireframes of 2D triangular meshes.
namespace meshflow {

struct Viewport {
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
    int width_px = 800;
};

/// One line per unique element edge, sorted by vertex indices; identical input
/// always yields identical bytes.
inline std::string render_svg(const SimplicialMesh<2>& mesh, const Viewport& vp = {}) {
    const double w = vp.xmax - vp.xmin, h = vp.ymax - vp.ymin;
    if (w <= 0.0 || h <= 0.0) throw std::invalid_argument("render_svg: empty viewport");
    const int height_px = static_cast<int>(vp.width_px * h / w + 0.5);
    const double sx = vp.width_px / w, sy = height_px / h;

    std::set<std::pair<int, int>> edges;
    for (const auto& e : mesh.elements)
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b)
                edges.insert({std::min(e[a], e[b]), std::max(e[a], e[b])});

    std::ostringstream out;
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << vp.width_px << "\" height=\""
        << height_px << "\" viewBox=\"0 0 " << vp.width_px << ' ' << height_px << "\">\n"
        << "<g stroke=\"black\" stroke-width=\"0.5\" fill=\"none\">\n";
    out.precision(6);
    out << std::fixed;
    for (const auto& [a, b] : edges) {
        const auto& pa = mesh.vertices[a];
        const auto& pb = mesh.vertices[b];
        // y flipped: SVG origin is top-left
        out << "<line x1=\"" << (pa.x() - vp.xmin) * sx << "\" y1=\"" << (vp.ymax - pa.y()) * sy
            << "\" x2=\"" << (pb.x() - vp.xmin) * sx << "\" y2=\"" << (vp.ymax - pb.y()) * sy
            << "\"/>\n";
    }
    out << "</g>\n</svg>\n";
    return out.str();
}

}  // namespace meshflow
