#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forward.hpp"

#include <cmath>
#include <cstdio>

using namespace sbs;

TEST_CASE("homogeneous sphere reduces to the analytic kernel (2n+1)/n") {
  SphericalHead head;
  head.sigma_skull = head.sigma_brain;  // no resistive layer
  auto f = spherical_transfer_factors(head, 60);
  for (int n = 1; n <= 60; ++n) {
    double want = (2.0 * n + 1.0) / n;
    CHECK(f[static_cast<std::size_t>(n - 1)] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("vanishing skull thickness recovers the homogeneous kernel") {
  // The middle layer's conductivity must stop mattering as its thickness
  // goes to zero; this exercises both interface conditions independently of
  // the homogeneous-case algebra.
  SphericalHead head;
  head.r_skull = head.r_brain + 1e-10;
  auto f = spherical_transfer_factors(head, 40);
  for (int n = 1; n <= 40; ++n)
    CHECK(f[static_cast<std::size_t>(n - 1)] ==
          doctest::Approx((2.0 * n + 1.0) / n).epsilon(1e-5));
}

TEST_CASE("resistive skull attenuates, and more so at high degree") {
  SphericalHead head;  // sigma ratio 80 by default
  auto f3 = spherical_transfer_factors(head, 80);
  for (int n = 1; n <= 80; ++n) {
    double hom = (2.0 * n + 1.0) / n;
    CHECK(f3[static_cast<std::size_t>(n - 1)] > 0.0);
    CHECK(f3[static_cast<std::size_t>(n - 1)] < hom);
  }
  // Spatial low-pass: relative attenuation grows with degree.
  for (int n = 2; n <= 80; ++n) {
    double r_prev = f3[static_cast<std::size_t>(n - 2)] / ((2.0 * (n - 1) + 1.0) / (n - 1));
    double r_cur = f3[static_cast<std::size_t>(n - 1)] / ((2.0 * n + 1.0) / n);
    CHECK(r_cur < r_prev);
  }
}

TEST_CASE("free-medium series matches the closed-form dipole potential") {
  SphericalHead head;
  const double R = head.r_scalp;
  std::vector<double> ones(400, 1.0);

  Rng rng(11);
  for (int iter = 0; iter < 50; ++iter) {
    // random dipole well inside the brain compartment
    Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    double b = rng.uniform(0.2, 0.9) * head.r_brain;
    Eigen::Vector3d pos = b * dir;
    Eigen::Vector3d orient(rng.normal(), rng.normal(), rng.normal());
    orient.normalize();
    Eigen::Vector3d edir(rng.normal(), rng.normal(), rng.normal());
    edir.normalize();
    Eigen::Vector3d electrode = R * edir;

    double series = dipole_potential_uV(head, ones, pos, orient, electrode);
    Eigen::Vector3d d = electrode - pos;
    double exact = 1e-3 / (4.0 * M_PI * head.sigma_brain) * orient.dot(d) / std::pow(d.norm(), 3);
    CHECK(series == doctest::Approx(exact).epsilon(1e-9));
  }
}

TEST_CASE("radial dipole is most visible at the electrode straight above it") {
  SphericalHead head;
  auto transfer = spherical_transfer_factors(head, 120);
  Eigen::Vector3d up(0, 0, 1);
  Eigen::Vector3d pos = 0.068 * up;
  double above = dipole_potential_uV(head, transfer, pos, up, head.r_scalp * up);
  double opposite = dipole_potential_uV(head, transfer, pos, up, -head.r_scalp * up);
  Eigen::Vector3d side(1, 0, 0);
  double lateral = dipole_potential_uV(head, transfer, pos, up, head.r_scalp * side);
  CHECK(above > 0.0);
  CHECK(above > std::abs(opposite));
  CHECK(above > std::abs(lateral));
}

TEST_CASE("montage directions are unit length and sit where their names say") {
  for (const auto& label : default_channel_labels()) {
    Eigen::Vector3d v = electrode_direction(label);
    CHECK(v.norm() == doctest::Approx(1.0).epsilon(1e-12));
    bool left = label.find('7') != std::string::npos || label.find('5') != std::string::npos ||
                label.find('3') != std::string::npos || label.find('1') != std::string::npos;
    if (left)
      CHECK(v.x() < 0.0);
    else
      CHECK(v.x() > 0.0);
  }
  // anterior/posterior split
  CHECK(electrode_direction("AF3").y() > 0.5);
  CHECK(electrode_direction("O1").y() < -0.5);
  // temporal electrodes at the ears
  CHECK(electrode_direction("T7").isApprox(Eigen::Vector3d(-1, 0, 0), 1e-12));
  CHECK(electrode_direction("T8").isApprox(Eigen::Vector3d(1, 0, 0), 1e-12));
  // left/right mirror symmetry
  Eigen::Vector3d af3 = electrode_direction("AF3"), af4 = electrode_direction("AF4");
  CHECK(af3.x() == doctest::Approx(-af4.x()).epsilon(1e-12));
  CHECK(af3.y() == doctest::Approx(af4.y()).epsilon(1e-12));
  CHECK(af3.z() == doctest::Approx(af4.z()).epsilon(1e-12));
  CHECK_THROWS_AS(electrode_direction("Cz"), Error);
}

TEST_CASE("template model structure") {
  ForwardModel m = make_template_model(1028);
  CHECK(m.n_channels() == 14);
  CHECK(m.n_vertices() == 1028);
  CHECK(m.channel_labels == default_channel_labels());

  // vertices on the cortical shell, positions in mm
  for (int i = 0; i < m.n_vertices(); ++i)
    CHECK(m.vertex_positions_mm.row(i).norm() == doctest::Approx(68.0).epsilon(1e-9));

  // adjacency: symmetric, no self loops, degree >= 6
  for (int v = 0; v < m.n_vertices(); ++v) {
    const auto& nbrs = m.mesh_adjacency[static_cast<std::size_t>(v)];
    CHECK(nbrs.size() >= 6);
    for (int nb : nbrs) {
      CHECK(nb != v);
      const auto& back = m.mesh_adjacency[static_cast<std::size_t>(nb)];
      CHECK(std::find(back.begin(), back.end(), v) != back.end());
    }
  }

  // average reference: each source's channel pattern is zero mean
  double gmax = m.gain.cwiseAbs().maxCoeff();
  Eigen::RowVectorXd col_means = m.gain.colwise().mean();
  CHECK(col_means.cwiseAbs().maxCoeff() <= 1e-12 * gmax);

  // ROIs: present, plausible cap sizes, disjoint hemispheres
  for (const char* name : {"PrecentralLeft", "PrecentralRight", "OccipitalLeft", "OccipitalRight"}) {
    const auto& verts = m.roi(name);
    CHECK(verts.size() >= 8);
    CHECK(verts.size() <= 25);
  }
  for (int v : m.roi("PrecentralLeft")) CHECK(m.vertex_positions_mm(v, 0) < 0.0);
  for (int v : m.roi("PrecentralRight")) CHECK(m.vertex_positions_mm(v, 0) > 0.0);
  for (int v : m.roi("OccipitalLeft")) CHECK(m.vertex_positions_mm(v, 1) < 0.0);
  CHECK_THROWS_AS(m.roi("Cerebellum"), Error);

  // left motor sources project more strongly to left-hemisphere electrodes
  auto channel_index = [&](const std::string& label) {
    for (int c = 0; c < m.n_channels(); ++c)
      if (m.channel_labels[static_cast<std::size_t>(c)] == label) return c;
    return -1;
  };
  int fc5 = channel_index("FC5"), fc6 = channel_index("FC6");
  double left_power = 0, right_power = 0;
  for (int v : m.roi("PrecentralLeft")) {
    left_power += m.gain(fc5, v) * m.gain(fc5, v);
    right_power += m.gain(fc6, v) * m.gain(fc6, v);
  }
  CHECK(left_power > right_power);

  CHECK_NOTHROW(m.validate());
}

TEST_CASE("template model is deterministic") {
  ForwardModel a = make_template_model(400);
  ForwardModel b = make_template_model(400);
  CHECK(a.gain == b.gain);
  CHECK(a.vertex_positions_mm == b.vertex_positions_mm);
  CHECK(a.mesh_adjacency == b.mesh_adjacency);
}

TEST_CASE("model file round-trip is exact") {
  ForwardModel m = make_template_model(200);
  std::string path = "tmp_model_roundtrip.sbfm";
  save_model(m, path);
  ForwardModel r = load_model(path);
  CHECK(r.gain == m.gain);
  CHECK(r.vertex_positions_mm == m.vertex_positions_mm);
  CHECK(r.mesh_adjacency == m.mesh_adjacency);
  CHECK(r.channel_labels == m.channel_labels);
  CHECK(r.roi_map == m.roi_map);
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_model("does_not_exist.sbfm"), Error);
}
