#ifndef SBS_FORWARD_HPP
#define SBS_FORWARD_HPP

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"

namespace sbs {

// Linear gain model: sensors = A * sources. A is channels x vertices in
// microvolts per nAm of (radially oriented) source current.
struct ForwardModel {
  Eigen::MatrixXd gain;                             // N_c x N_d, uV per nAm
  Eigen::Matrix<double, Eigen::Dynamic, 3> vertex_positions_mm;  // N_d x 3
  std::vector<std::vector<int>> mesh_adjacency;     // symmetric neighbor lists
  std::vector<std::string> channel_labels;
  std::map<std::string, std::vector<int>> roi_map;  // name -> vertex ids

  int n_channels() const { return static_cast<int>(gain.rows()); }
  int n_vertices() const { return static_cast<int>(gain.cols()); }

  // Throws Errc::unknown_roi with the offending name.
  const std::vector<int>& roi(const std::string& name) const;

  // Structural checks (label/adjacency/roi sizes, finiteness).
  void validate() const;
};

// Geometry of the concentric-sphere head approximation used by the builtin
// template model. Radii in meters, conductivities in S/m.
struct SphericalHead {
  double r_brain = 0.080;
  double r_skull = 0.085;
  double r_scalp = 0.090;
  double sigma_brain = 0.33;
  double sigma_skull = 0.33 / 80.0;
  double sigma_scalp = 0.33;
};

// Per-degree transfer factors for the layered sphere: scalp-surface potential
// coefficient per unit source coefficient. index 0 holds degree n=1.
std::vector<double> spherical_transfer_factors(const SphericalHead& head, int max_degree);

// Scalp potential (uV) at electrode positions for a unit 1 nAm dipole at
// pos_m with unit orientation orient. Electrodes are on the scalp sphere.
double dipole_potential_uV(const SphericalHead& head, const std::vector<double>& transfer,
                           const Eigen::Vector3d& pos_m, const Eigen::Vector3d& orient,
                           const Eigen::Vector3d& electrode_m);

// The 14 electrode labels of the default montage, in stream order.
const std::vector<std::string>& default_channel_labels();

// Unit-sphere direction for a 10-20 style label of the default montage.
Eigen::Vector3d electrode_direction(const std::string& label);

// Builtin template model: Fibonacci-lattice cortical shell with radial
// orientations inside a three-layer spherical head, 14-channel montage,
// average-referenced gain, and Precentral/Occipital ROI caps.
// Deterministic for a given vertex count.
ForwardModel make_template_model(int n_vertices = 1028);

// SBFM v1 container: "SBFM" magic, u32 json length, JSON header, then
// float64 little-endian blobs (gain row-major, positions row-major) and the
// adjacency in CSR form. See docs/FORMATS.md.
void save_model(const ForwardModel& model, const std::string& path);
ForwardModel load_model(const std::string& path);

}  // namespace sbs

#endif  // SBS_FORWARD_HPP
