#include "meshflow/fields.hpp"
#include "meshflow/svg.hpp"
#include "meshflow/mmpde.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace meshflow;
using Catch::Approx;

TEST_CASE("example fields") {
    SECTION("sine wave, steepness 30") {
        const auto u = example_field("sine_wave_30");
        // on the interface y = 0.5 + 0.25 sin(2 pi x) the field vanishes
        CHECK(u({0.25, 0.75}) == Approx(0.0).margin(1e-14));
        CHECK(u({0.0, 0.5}) == Approx(0.0).margin(1e-14));
        CHECK(u({0.0, 0.0}) == Approx(std::tanh(15.0)).epsilon(1e-14));
        CHECK(u({0.0, 1.0}) == Approx(std::tanh(-15.0)).epsilon(1e-14));
    }
    SECTION("steepness scales the argument") {
        const auto u30 = example_field("sine_wave_30");
        const auto u100 = example_field("sine_wave_100");
        const Eigen::Vector2d x(0.3, 0.52);
        const double s = x.y() - 0.5 - 0.25 * std::sin(2.0 * M_PI * x.x());
        CHECK(u30(x) == Approx(std::tanh(-30.0 * s)).epsilon(1e-14));
        CHECK(u100(x) == Approx(std::tanh(-100.0 * s)).epsilon(1e-14));
    }
    SECTION("five spheres") {
        const auto u = example_field("five_spheres");
        // center of the domain maps to (X, Y) = (0, 0): on top of the first
        // circle center, distance 1/sqrt(2) from the other four
        CHECK(u({0.5, 0.5}) ==
              Approx(std::tanh(-30.0 * 0.125) + 4.0 * std::tanh(30.0 * 0.375)).epsilon(1e-13));
        // symmetric under the square's reflections
        CHECK(u({0.2, 0.3}) == Approx(u({0.8, 0.7})).epsilon(1e-13));
        CHECK(u({0.2, 0.3}) == Approx(u({0.3, 0.2})).epsilon(1e-13));
    }
    SECTION("unknown name throws") {
        CHECK_THROWS_AS(example_field("bump"), std::invalid_argument);
    }
}

TEST_CASE("uniform square mesh") {
    const auto ref = build_reference_element<2>();
    for (int n : {1, 4, 9}) {
        const auto mesh = uniform_square_mesh(n);
        CHECK(mesh.num_vertices() == (n + 1) * (n + 1));
        CHECK(mesh.num_elements() == 2 * n * n);
        double vol = 0.0;
        for (int k = 0; k < mesh.num_elements(); ++k)
            vol += element_geometry(mesh, ref, k).volume;
        CHECK(vol == Approx(1.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(uniform_square_mesh(0), std::invalid_argument);
}

TEST_CASE("svg rendering") {
    const auto mesh = uniform_square_mesh(1);  // 2 triangles, 5 unique edges
    const auto svg = render_svg(mesh);

    SECTION("one line element per unique edge") {
        size_t count = 0, pos = 0;
        while ((pos = svg.find("<line ", pos)) != std::string::npos) {
            ++count;
            pos += 6;
        }
        CHECK(count == 5);
        CHECK(svg.find("<svg ") != std::string::npos);
        CHECK(svg.find("</svg>") != std::string::npos);
    }
    SECTION("byte-deterministic") { CHECK(render_svg(mesh) == svg); }
    SECTION("y axis is flipped") {
        // vertex (0,0) must land at pixel y = height, i.e. "y1=\"800.000000\""
        CHECK(svg.find("y1=\"800.000000\"") != std::string::npos);
    }
    SECTION("empty viewport throws") {
        Viewport vp;
        vp.xmax = vp.xmin;
        CHECK_THROWS_AS(render_svg(mesh, vp), std::invalid_argument);
    }
}

TEST_CASE("trajectory csv layout") {
    TrajectoryRecord rec;
    rec.times = {0.0, 0.5};
    rec.energies = {2.0, 1.5};
    rec.min_volume = {0.25, 0.2};
    rec.min_metric_altitude = {0.5, 0.4};
    rec.accepted_so_far = {0, 3};
    std::ostringstream os;
    write_trajectory_csv(os, rec);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "t,I_h,min_vol,min_alt_M,accepted");
    std::getline(is, line);
    CHECK(line == "0,2,0.25,0.5,0");
    std::getline(is, line);
    CHECK(line == "0.5,1.5,0.20000000000000001,0.40000000000000002,3");
}
