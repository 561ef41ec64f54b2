#include "forward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace sbs {

using nlohmann::json;

const std::vector<int>& ForwardModel::roi(const std::string& name) const {
  auto it = roi_map.find(name);
  if (it == roi_map.end()) {
    std::string known;
    for (const auto& [k, v] : roi_map) known += (known.empty() ? "" : ", ") + k;
    fail(Errc::unknown_roi, "UnknownRoi: '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

void ForwardModel::validate() const {
  int nc = n_channels(), nd = n_vertices();
  if (nc <= 0 || nd <= 0) fail(Errc::invalid_argument, "forward model: empty gain matrix");
  if (static_cast<int>(channel_labels.size()) != nc)
    fail(Errc::invalid_argument, "forward model: channel_labels size != gain rows");
  if (vertex_positions_mm.rows() != nd)
    fail(Errc::invalid_argument, "forward model: vertex_positions size != gain cols");
  if (static_cast<int>(mesh_adjacency.size()) != nd)
    fail(Errc::invalid_argument, "forward model: adjacency size != gain cols");
  if (!gain.allFinite()) fail(Errc::non_finite, "forward model: gain has non-finite entries");
  for (const auto& [name, verts] : roi_map)
    for (int v : verts)
      if (v < 0 || v >= nd)
        fail(Errc::invalid_argument, "forward model: ROI '" + name + "' references vertex " +
                                         std::to_string(v) + " outside mesh");
}

// ---------------------------------------------------------------------------
// Layered-sphere solution. Per spherical-harmonic degree n the potential in
// shell k is (A_k u^n + B_k u^-(n+1)) * angular(n), with u = r / r_scalp.
// The dipole source contributes a known u^-(n+1) coefficient in the innermost
// shell; interface continuity of V and sigma*dV/dr plus the insulating outer
// boundary determine the rest. The returned factor is the scalp-surface
// coefficient sum A_K + B_K for a unit source coefficient.

std::vector<double> spherical_transfer_factors(const SphericalHead& head, int max_degree) {
  if (!(head.r_brain < head.r_skull && head.r_skull < head.r_scalp))
    fail(Errc::invalid_argument, "spherical head: radii must increase brain < skull < scalp");
  const double rho1 = head.r_brain / head.r_scalp;
  const double rho2 = head.r_skull / head.r_scalp;
  const double s1 = head.sigma_brain, s2 = head.sigma_skull, s3 = head.sigma_scalp;

  std::vector<double> factors(static_cast<std::size_t>(max_degree));
  Eigen::Matrix<double, 5, 5> m;
  Eigen::Matrix<double, 5, 1> rhs;
  for (int n = 1; n <= max_degree; ++n) {
    const double dn = n, dn1 = n + 1.0;
    const double p1n = std::pow(rho1, dn), p1m = std::pow(rho1, -dn1);
    const double p2n = std::pow(rho2, dn), p2m = std::pow(rho2, -dn1);
    // unknowns: A1, A2, B2, A3, B3
    m.setZero();
    rhs.setZero();
    // V continuity at rho1:  A1*p1n + p1m = A2*p1n + B2*p1m
    m(0, 0) = p1n;
    m(0, 1) = -p1n;
    m(0, 2) = -p1m;
    rhs(0) = -p1m;
    // sigma*dV/du at rho1 (common 1/rho factor divided out):
    //   s1*(n*A1*p1n - (n+1)*p1m) = s2*(n*A2*p1n - (n+1)*B2*p1m)
    m(1, 0) = s1 * dn * p1n;
    m(1, 1) = -s2 * dn * p1n;
    m(1, 2) = s2 * dn1 * p1m;
    rhs(1) = s1 * dn1 * p1m;
    // V continuity at rho2
    m(2, 1) = p2n;
    m(2, 2) = p2m;
    m(2, 3) = -p2n;
    m(2, 4) = -p2m;
    // current continuity at rho2
    m(3, 1) = s2 * dn * p2n;
    m(3, 2) = -s2 * dn1 * p2m;
    m(3, 3) = -s3 * dn * p2n;
    m(3, 4) = s3 * dn1 * p2m;
    // insulating boundary at u=1: n*A3 - (n+1)*B3 = 0
    m(4, 3) = dn;
    m(4, 4) = -dn1;

    Eigen::Matrix<double, 5, 1> x = m.fullPivLu().solve(rhs);
    factors[static_cast<std::size_t>(n - 1)] = x(3) + x(4);  // A3 + B3 at u=1
  }
  return factors;
}

double dipole_potential_uV(const SphericalHead& head, const std::vector<double>& transfer,
                           const Eigen::Vector3d& pos_m, const Eigen::Vector3d& orient,
                           const Eigen::Vector3d& electrode_m) {
  const double R = head.r_scalp;
  const double b = pos_m.norm();
  if (b < 1e-9 * R) fail(Errc::invalid_argument, "dipole at sphere center is unsupported");
  if (b >= head.r_brain) fail(Errc::invalid_argument, "dipole outside brain compartment");
  const Eigen::Vector3d p_hat = pos_m / b;
  const Eigen::Vector3d r_hat = electrode_m.normalized();
  double cg = std::clamp(p_hat.dot(r_hat), -1.0, 1.0);

  const double q_r = orient.dot(p_hat);
  Eigen::Vector3d t_vec = r_hat - cg * p_hat;
  double st = t_vec.norm();
  const double q_t = st > 1e-12 ? orient.dot(t_vec / st) : 0.0;

  // 1e-3 = 1e-9 A*m per nAm times 1e6 uV per V.
  const double c0 = 1e-3 / (4.0 * M_PI * head.sigma_brain * R * R);
  const double b_hat = b / R;
  const double sg = std::sqrt(std::max(0.0, 1.0 - cg * cg));

  // Legendre recurrences: pm1/p0 track P_{n-1}, P_n.
  double pm1 = 1.0, p0 = cg;  // P_0, P_1
  double bpow = 1.0;          // b_hat^(n-1)
  double sum = 0.0;
  const int max_n = static_cast<int>(transfer.size());
  for (int n = 1; n <= max_n; ++n) {
    // dP_n/dx via (1-x^2) P_n' = n (P_{n-1} - x P_n); tangential term is
    // sin(gamma) * P_n'(cos gamma).
    double pn1bar = 0.0;
    if (sg > 1e-12) pn1bar = n * (pm1 - cg * p0) / sg;
    sum += transfer[static_cast<std::size_t>(n - 1)] * bpow * (n * q_r * p0 + q_t * pn1bar);
    // advance
    double pnext = ((2.0 * n + 1.0) * cg * p0 - n * pm1) / (n + 1.0);
    pm1 = p0;
    p0 = pnext;
    bpow *= b_hat;
  }
  return c0 * sum;
}

// ---------------------------------------------------------------------------
// Template montage: 10-20 style positions generated on the unit sphere.
// Row circles sit at sagittal angle psi from nasion (y = cos psi), positions
// run along each circle at angle tau from the right ear (+x).

namespace {

struct MontageEntry {
  const char* label;
  double psi_deg;
  double tau_deg;
};

constexpr MontageEntry kMontage[] = {
    {"AF3", 36, 135},  {"F7", 54, 180},  {"F3", 54, 135},  {"FC5", 72, 157.5},
    {"T7", 90, 180},   {"P7", 126, 180}, {"O1", 162, 180}, {"O2", 162, 0},
    {"P8", 126, 0},    {"T8", 90, 0},    {"FC6", 72, 22.5},{"F4", 54, 45},
    {"F8", 54, 0},     {"AF4", 36, 45},
};

Eigen::Vector3d montage_direction(const MontageEntry& e) {
  double psi = e.psi_deg * M_PI / 180.0;
  double tau = e.tau_deg * M_PI / 180.0;
  return {std::sin(psi) * std::cos(tau), std::cos(psi), std::sin(psi) * std::sin(tau)};
}

std::vector<int> cap_vertices(const Eigen::Matrix<double, Eigen::Dynamic, 3>& pos,
                              const Eigen::Vector3d& center_dir, double half_angle_deg) {
  std::vector<int> out;
  double cos_min = std::cos(half_angle_deg * M_PI / 180.0);
  Eigen::Vector3d c = center_dir.normalized();
  for (int i = 0; i < pos.rows(); ++i) {
    Eigen::Vector3d v = pos.row(i).normalized();
    if (v.dot(c) >= cos_min) out.push_back(i);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& default_channel_labels() {
  static const std::vector<std::string> labels = [] {
    std::vector<std::string> v;
    for (const auto& e : kMontage) v.push_back(e.label);
    return v;
  }();
  return labels;
}

Eigen::Vector3d electrode_direction(const std::string& label) {
  for (const auto& e : kMontage)
    if (label == e.label) return montage_direction(e);
  fail(Errc::invalid_argument, "unknown electrode label '" + label + "'");
}

ForwardModel make_template_model(int n_vertices) {
  if (n_vertices < 8) fail(Errc::invalid_argument, "template model needs >= 8 vertices");
  SphericalHead head;
  const double r_cortex = 0.85 * head.r_brain;

  ForwardModel model;
  model.channel_labels = default_channel_labels();
  const int nc = static_cast<int>(model.channel_labels.size());

  // Fibonacci lattice on the cortical shell.
  model.vertex_positions_mm.resize(n_vertices, 3);
  const double golden_angle = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n_vertices; ++i) {
    double z = 1.0 - 2.0 * (i + 0.5) / n_vertices;
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    double phi = golden_angle * i;
    Eigen::Vector3d v(r * std::cos(phi), r * std::sin(phi), z);
    model.vertex_positions_mm.row(i) = (v * r_cortex * 1000.0).transpose();
  }

  // Symmetrized k-nearest-neighbor adjacency.
  const int k = 6;
  model.mesh_adjacency.assign(static_cast<std::size_t>(n_vertices), {});
  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n_vertices));
  for (int i = 0; i < n_vertices; ++i) {
    for (int j = 0; j < n_vertices; ++j)
      dist[static_cast<std::size_t>(j)] = {
          (model.vertex_positions_mm.row(i) - model.vertex_positions_mm.row(j)).squaredNorm(), j};
    std::partial_sort(dist.begin(), dist.begin() + k + 1, dist.end());
    for (int j = 0; j <= k; ++j) {
      int nb = dist[static_cast<std::size_t>(j)].second;
      if (nb == i) continue;
      auto& a = model.mesh_adjacency[static_cast<std::size_t>(i)];
      auto& b = model.mesh_adjacency[static_cast<std::size_t>(nb)];
      if (std::find(a.begin(), a.end(), nb) == a.end()) a.push_back(nb);
      if (std::find(b.begin(), b.end(), i) == b.end()) b.push_back(i);
    }
  }
  for (auto& nbrs : model.mesh_adjacency) std::sort(nbrs.begin(), nbrs.end());

  // Gain matrix: radial unit dipoles through the layered sphere, then
  // average reference across channels.
  auto transfer = spherical_transfer_factors(head, 120);
  std::vector<Eigen::Vector3d> electrodes;
  for (const auto& e : kMontage) electrodes.push_back(montage_direction(e) * head.r_scalp);

  model.gain.resize(nc, n_vertices);
  for (int d = 0; d < n_vertices; ++d) {
    Eigen::Vector3d pos = model.vertex_positions_mm.row(d).transpose() / 1000.0;
    Eigen::Vector3d orient = pos.normalized();
    for (int c = 0; c < nc; ++c)
      model.gain(c, d) = dipole_potential_uV(head, transfer, pos, orient, electrodes[static_cast<std::size_t>(c)]);
  }
  model.gain.rowwise() -= model.gain.colwise().mean();

  // ROI caps. Neurological convention: +x right, +y anterior, +z superior.
  const double cap_deg = 14.0;
  model.roi_map["PrecentralLeft"] =
      cap_vertices(model.vertex_positions_mm, {-0.50, -0.15, 0.85}, cap_deg);
  model.roi_map["PrecentralRight"] =
      cap_vertices(model.vertex_positions_mm, {0.50, -0.15, 0.85}, cap_deg);
  model.roi_map["OccipitalLeft"] =
      cap_vertices(model.vertex_positions_mm, {-0.30, -0.90, 0.20}, cap_deg);
  model.roi_map["OccipitalRight"] =
      cap_vertices(model.vertex_positions_mm, {0.30, -0.90, 0.20}, cap_deg);
  for (const auto& [name, verts] : model.roi_map)
    if (verts.empty())
      fail(Errc::runtime, "template model: ROI '" + name + "' is empty at this resolution");

  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// SBFM container.

namespace {

void write_all(std::ofstream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) fail(Errc::io, "short write while saving model");
}

void read_all(std::ifstream& in, void* data, std::size_t n) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) fail(Errc::bad_format, "model file truncated");
}

}  // namespace

void save_model(const ForwardModel& model, const std::string& path) {
  model.validate();
  json j;
  j["version"] = 1;
  j["channel_count"] = model.n_channels();
  j["vertex_count"] = model.n_vertices();
  j["channel_labels"] = model.channel_labels;
  j["roi_map"] = model.roi_map;
  j["units"] = {{"gain", "uV_per_nAm"}, {"positions", "mm"}};
  std::string header = j.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot open '" + path + "' for writing");
  write_all(out, "SBFM", 4);
  std::uint32_t len = static_cast<std::uint32_t>(header.size());
  std::uint8_t len_le[4] = {static_cast<std::uint8_t>(len & 0xff), static_cast<std::uint8_t>((len >> 8) & 0xff),
                            static_cast<std::uint8_t>((len >> 16) & 0xff), static_cast<std::uint8_t>(len >> 24)};
  write_all(out, len_le, 4);
  write_all(out, header.data(), header.size());

  // Row-major f64 blobs.
  const int nc = model.n_channels(), nd = model.n_vertices();
  std::vector<double> buf(static_cast<std::size_t>(nc) * nd);
  for (int r = 0; r < nc; ++r)
    for (int c = 0; c < nd; ++c) buf[static_cast<std::size_t>(r) * nd + c] = model.gain(r, c);
  write_all(out, buf.data(), buf.size() * sizeof(double));

  buf.resize(static_cast<std::size_t>(nd) * 3);
  for (int r = 0; r < nd; ++r)
    for (int c = 0; c < 3; ++c) buf[static_cast<std::size_t>(r) * 3 + c] = model.vertex_positions_mm(r, c);
  write_all(out, buf.data(), buf.size() * sizeof(double));

  std::vector<std::uint32_t> offsets(1, 0);
  std::vector<std::uint32_t> indices;
  for (const auto& nbrs : model.mesh_adjacency) {
    for (int nb : nbrs) indices.push_back(static_cast<std::uint32_t>(nb));
    offsets.push_back(static_cast<std::uint32_t>(indices.size()));
  }
  std::uint32_t counts[2] = {static_cast<std::uint32_t>(offsets.size()),
                             static_cast<std::uint32_t>(indices.size())};
  write_all(out, counts, sizeof(counts));
  write_all(out, offsets.data(), offsets.size() * sizeof(std::uint32_t));
  if (!indices.empty()) write_all(out, indices.data(), indices.size() * sizeof(std::uint32_t));
}

ForwardModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open model file '" + path + "'");
  char magic[4];
  read_all(in, magic, 4);
  if (std::string(magic, 4) != "SBFM") fail(Errc::bad_format, "bad model magic (expected SBFM)");
  std::uint8_t len_le[4];
  read_all(in, len_le, 4);
  std::uint32_t len = get_u32(len_le);
  if (len > (1u << 24)) fail(Errc::bad_format, "model header too large");
  std::string header(len, '\0');
  read_all(in, header.data(), len);
  json j = json::parse(header, nullptr, false);
  if (j.is_discarded()) fail(Errc::bad_format, "model header is not valid JSON");

  ForwardModel model;
  int nc = 0, nd = 0;
  try {
    nc = j.at("channel_count").get<int>();
    nd = j.at("vertex_count").get<int>();
    model.channel_labels = j.at("channel_labels").get<std::vector<std::string>>();
    model.roi_map = j.at("roi_map").get<std::map<std::string, std::vector<int>>>();
  } catch (const json::exception& e) {
    fail(Errc::bad_format, std::string("model header: ") + e.what());
  }
  if (nc <= 0 || nd <= 0 || nc > 4096 || nd > 1000000)
    fail(Errc::bad_format, "model header: implausible dimensions");

  std::vector<double> buf(static_cast<std::size_t>(nc) * nd);
  read_all(in, buf.data(), buf.size() * sizeof(double));
  model.gain.resize(nc, nd);
  for (int r = 0; r < nc; ++r)
    for (int c = 0; c < nd; ++c) model.gain(r, c) = buf[static_cast<std::size_t>(r) * nd + c];

  buf.resize(static_cast<std::size_t>(nd) * 3);
  read_all(in, buf.data(), buf.size() * sizeof(double));
  model.vertex_positions_mm.resize(nd, 3);
  for (int r = 0; r < nd; ++r)
    for (int c = 0; c < 3; ++c) model.vertex_positions_mm(r, c) = buf[static_cast<std::size_t>(r) * 3 + c];

  std::uint32_t counts[2];
  read_all(in, counts, sizeof(counts));
  if (counts[0] != static_cast<std::uint32_t>(nd) + 1) fail(Errc::bad_format, "model adjacency offsets mismatch");
  std::vector<std::uint32_t> offsets(counts[0]);
  read_all(in, offsets.data(), offsets.size() * sizeof(std::uint32_t));
  std::vector<std::uint32_t> indices(counts[1]);
  if (counts[1]) read_all(in, indices.data(), indices.size() * sizeof(std::uint32_t));
  model.mesh_adjacency.resize(static_cast<std::size_t>(nd));
  for (int v = 0; v < nd; ++v) {
    if (offsets[static_cast<std::size_t>(v) + 1] < offsets[static_cast<std::size_t>(v)] ||
        offsets[static_cast<std::size_t>(v) + 1] > counts[1])
      fail(Errc::bad_format, "model adjacency offsets corrupt");
    for (std::uint32_t i = offsets[static_cast<std::size_t>(v)]; i < offsets[static_cast<std::size_t>(v) + 1]; ++i) {
      if (indices[i] >= static_cast<std::uint32_t>(nd)) fail(Errc::bad_format, "model adjacency index out of range");
      model.mesh_adjacency[static_cast<std::size_t>(v)].push_back(static_cast<int>(indices[i]));
    }
  }
  model.validate();
  return model;
}

}  // namespace sbs
