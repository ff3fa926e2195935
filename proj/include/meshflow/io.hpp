#pragma once

#include "meshflow/geometry.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace meshflow {

class MeshIoError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// ASCII mesh format: header "d N_v N", N_v coordinate lines, N element lines
/// of d+1 zero-based vertex indices, N_v boundary tag lines (0/1/2).
template <int D>
SimplicialMesh<D> read_mesh(std::istream& in) {
    SimplicialMesh<D> mesh;
    int d = 0, nv = 0, ne = 0;
    if (!(in >> d >> nv >> ne)) throw MeshIoError("mesh file: bad header");
    if (d != D) throw MeshIoError("mesh file: dimension " + std::to_string(d) +
                                  ", expected " + std::to_string(D));
    if (nv <= 0 || ne <= 0) throw MeshIoError("mesh file: nonpositive counts");
    mesh.vertices.resize(nv);
    for (int i = 0; i < nv; ++i)
        for (int c = 0; c < D; ++c)
            if (!(in >> mesh.vertices[i][c])) throw MeshIoError("mesh file: bad coordinate line");
    mesh.elements.resize(ne);
    for (int k = 0; k < ne; ++k)
        for (int j = 0; j <= D; ++j)
            if (!(in >> mesh.elements[k][j])) throw MeshIoError("mesh file: bad element line");
    mesh.boundary.resize(nv);
    for (int i = 0; i < nv; ++i) {
        int tag;
        if (!(in >> tag)) throw MeshIoError("mesh file: bad boundary tag line");
        if (tag < 0 || tag > 2) throw MeshIoError("mesh file: boundary tag out of range");
        mesh.boundary[i].cls = static_cast<VertexClass>(tag);
    }
    validate_connectivity(mesh);
    enforce_positive_orientation(mesh);
    mesh.build_patches();
    mesh.refresh_degeneracy_tol();
    return mesh;
}

template <int D>
SimplicialMesh<D> read_mesh_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MeshIoError("cannot open mesh file: " + path);
    return read_mesh<D>(in);
}

template <int D>
void write_mesh(std::ostream& out, const SimplicialMesh<D>& mesh) {
    out << D << ' ' << mesh.num_vertices() << ' ' << mesh.num_elements() << '\n';
    out << std::setprecision(17);
    for (const auto& x : mesh.vertices) {
        for (int c = 0; c < D; ++c) out << (c ? " " : "") << x[c];
        out << '\n';
    }
    for (const auto& e : mesh.elements) {
        for (int j = 0; j <= D; ++j) out << (j ? " " : "") << e[j];
        out << '\n';
    }
    for (const auto& b : mesh.boundary) out << static_cast<int>(b.cls) << '\n';
}

template <int D>
void write_mesh_file(const std::string& path, const SimplicialMesh<D>& mesh) {
    std::ofstream out(path);
    if (!out) throw MeshIoError("cannot open output file: " + path);
    write_mesh(out, mesh);
}

}  // namespace meshflow
