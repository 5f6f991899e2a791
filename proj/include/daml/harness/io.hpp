#pragma once

// File formats. Every CSV starts with a "# daml <kind> v<version>" line
// followed by a column header; numbers are written with 17 significant digits.

#include "daml/core.hpp"
#include "daml/ensemble_da.hpp"
#include "daml/em_trainer.hpp"
#include "daml/metrics.hpp"
#include "daml/model_error.hpp"
#include "daml/surrogate.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace daml::harness {

inline constexpr int kFormatVersion = 1;

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return in;
}

inline void expect_header(std::istream& in, const std::string& kind, const std::filesystem::path& path) {
  std::string line;
  std::getline(in, line);
  const std::string want = "# daml " + kind + " v" + std::to_string(kFormatVersion);
  if (line.rfind(want, 0) != 0)
    throw ConfigError("'" + path.string() + "': expected header '" + want + "', got '" + line + "'");
}

inline std::vector<double> split_numbers(const std::string& line) {
  std::vector<double> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trajectories and observations

inline void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  auto out = detail::open_out(path);
  out << "# daml trajectory v" << kFormatVersion << " dt=" << detail::num(traj.dt) << "\n";
  out << "k";
  for (Eigen::Index i = 0; i < traj.nx(); ++i) out << ",x" << i;
  out << "\n";
  for (std::size_t k = 0; k < traj.size(); ++k) {
    out << k;
    for (Eigen::Index i = 0; i < traj[k].size(); ++i) out << "," << traj[k][i];
    out << "\n";
  }
}

inline Trajectory read_trajectory(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  std::getline(in, line);
  const std::string want = "# daml trajectory v" + std::to_string(kFormatVersion);
  if (line.rfind(want, 0) != 0) throw ConfigError("'" + path.string() + "': not a trajectory file");
  Trajectory traj;
  const auto pos = line.find("dt=");
  if (pos == std::string::npos) throw ConfigError("'" + path.string() + "': missing dt");
  traj.dt = std::stod(line.substr(pos + 3));
  std::getline(in, line);  // column names
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = detail::split_numbers(line);
    if (v.size() < 2) throw ConfigError("'" + path.string() + "': malformed row");
    traj.states.push_back(Eigen::Map<const Vector>(v.data() + 1, static_cast<Eigen::Index>(v.size() - 1)));
    if (traj.states.back().size() != traj.states.front().size())
      throw DimensionError("'" + path.string() + "': ragged rows");
  }
  return traj;
}

/// Long format: one row per (k, site).
inline void write_observations(const std::filesystem::path& path, const std::vector<enda::ObservationSlot>& obs,
                               Eigen::Index nx) {
  auto out = detail::open_out(path);
  const double sigma = obs.empty() ? 0.0 : obs.front().sigma_y;
  out << "# daml observations v" << kFormatVersion << " nx=" << nx << " sigma_y=" << detail::num(sigma)
      << " slots=" << obs.size() << "\n";
  out << "k,site,value\n";
  for (const auto& s : obs)
    for (std::size_t i = 0; i < s.sites.size(); ++i) out << s.k << "," << s.sites[i] << "," << s.values[static_cast<Eigen::Index>(i)] << "\n";
}

struct ObservationFile {
  std::vector<enda::ObservationSlot> slots;
  Eigen::Index nx = 0;
};

inline ObservationFile read_observations(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  std::getline(in, line);
  const std::string want = "# daml observations v" + std::to_string(kFormatVersion);
  if (line.rfind(want, 0) != 0) throw ConfigError("'" + path.string() + "': not an observation file");
  auto field = [&](const std::string& key) {
    const auto pos = line.find(key + "=");
    if (pos == std::string::npos) throw ConfigError("'" + path.string() + "': missing " + key);
    return line.substr(pos + key.size() + 1, line.find(' ', pos) - pos - key.size() - 1);
  };
  ObservationFile f;
  f.nx = std::stol(field("nx"));
  const double sigma = std::stod(field("sigma_y"));
  const auto n_slots = std::stoul(field("slots"));
  std::vector<std::vector<std::pair<int, double>>> rows(n_slots);
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = detail::split_numbers(line);
    if (v.size() != 3) throw ConfigError("'" + path.string() + "': malformed row");
    const auto k = static_cast<std::size_t>(v[0]);
    if (k >= n_slots) throw ConfigError("'" + path.string() + "': slot index out of range");
    rows[k].emplace_back(static_cast<int>(v[1]), v[2]);
  }
  for (std::size_t k = 0; k < n_slots; ++k) {
    enda::ObservationSlot s;
    s.k = static_cast<int>(k);
    s.sigma_y = sigma;
    s.values.resize(static_cast<Eigen::Index>(rows[k].size()));
    for (std::size_t i = 0; i < rows[k].size(); ++i) {
      s.sites.push_back(rows[k][i].first);
      s.values[static_cast<Eigen::Index>(i)] = rows[k][i].second;
    }
    f.slots.push_back(std::move(s));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Model error and checkpoints

inline nlohmann::json to_json(const ModelErrorCov& q) {
  nlohmann::json j;
  j["format"] = "daml-model-error";
  j["format_version"] = kFormatVersion;
  j["variant"] = to_string(q.variant());
  j["nx"] = q.nx();
  if (q.variant() == QVariant::Full) {
    const Matrix m = q.dense();
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
      rows.push_back(row);
    }
    j["matrix"] = rows;
  } else {
    const Vector& d = q.diagonal_values();
    j["diagonal"] = std::vector<double>(d.data(), d.data() + d.size());
  }
  return j;
}

inline ModelErrorCov model_error_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "daml-model-error") throw ConfigError("model error: wrong format tag");
  if (j.at("format_version").get<int>() != kFormatVersion) throw ConfigError("model error: unsupported format_version");
  const QVariant v = parse_q_variant(j.at("variant").get<std::string>());
  const auto nx = j.at("nx").get<Eigen::Index>();
  if (v == QVariant::Full) {
    const auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
    if (static_cast<Eigen::Index>(rows.size()) != nx) throw DimensionError("model error: matrix size");
    Matrix m(nx, nx);
    for (Eigen::Index r = 0; r < nx; ++r) {
      if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)].size()) != nx) throw DimensionError("model error: row size");
      for (Eigen::Index c = 0; c < nx; ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
    return ModelErrorCov::full(m);
  }
  const auto d = j.at("diagonal").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(d.size()) != nx) throw DimensionError("model error: diagonal size");
  const Vector dv = Eigen::Map<const Vector>(d.data(), nx);
  return v == QVariant::Scalar ? ModelErrorCov::scalar(dv[0], nx) : ModelErrorCov::diagonal(dv);
}

struct Checkpoint {
  int iteration = 0;
  surrogate::SurrogateParams a;
  ModelErrorCov q = ModelErrorCov::scalar(1.0, 1);
};

inline void write_checkpoint(const std::filesystem::path& path, int iteration, const surrogate::SurrogateParams& a,
                             const ModelErrorCov& q) {
  nlohmann::json j;
  j["format"] = "daml-checkpoint";
  j["format_version"] = kFormatVersion;
  j["iteration"] = iteration;
  j["surrogate"] = surrogate::to_json(a);
  j["model_error"] = to_json(q);
  auto out = detail::open_out(path);
  out << j.dump(2) << "\n";
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "daml-checkpoint") throw ConfigError("'" + path.string() + "': not a checkpoint");
  if (j.at("format_version").get<int>() != kFormatVersion) throw ConfigError("checkpoint: unsupported format_version");
  return {j.at("iteration").get<int>(), surrogate::from_json(j.at("surrogate")), model_error_from_json(j.at("model_error"))};
}

// ---------------------------------------------------------------------------
// Metric tables

inline void write_history(const std::filesystem::path& path, const std::vector<em::IterationRecord>& hist) {
  auto out = detail::open_out(path);
  out << "# daml history v" << kFormatVersion << "\n";
  out << "iter,sigma_q,loss,grad_norm,state_rmse\n";
  for (const auto& r : hist)
    out << r.iter << "," << r.sigma_q << "," << r.loss << "," << r.grad_norm << "," << r.state_rmse << "\n";
}

inline void write_fs(const std::filesystem::path& path, const metrics::ForecastSkillCurve& c) {
  auto out = detail::open_out(path);
  out << "# daml fs v" << kFormatVersion << " lead in Lyapunov times, nrmse dimensionless\n";
  out << "lead_lyap,nrmse,n_trials\n";
  for (std::size_t i = 0; i < c.nrmse.size(); ++i) out << c.lead_times[i] << "," << c.nrmse[i] << "," << c.n_trials << "\n";
}

inline metrics::ForecastSkillCurve read_fs(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  detail::expect_header(in, "fs", path);
  std::string line;
  std::getline(in, line);
  metrics::ForecastSkillCurve c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = detail::split_numbers(line);
    c.lead_times.push_back(v.at(0));
    c.nrmse.push_back(v.at(1));
    c.n_trials = static_cast<int>(v.at(2));
  }
  return c;
}

inline void write_ls(const std::filesystem::path& path, const metrics::LyapunovSpectrum& s) {
  auto out = detail::open_out(path);
  out << "# daml ls v" << kFormatVersion << " exponent in inverse model time units\n";
  out << "rank,exponent\n";
  for (std::size_t i = 0; i < s.exponents.size(); ++i) out << i + 1 << "," << s.exponents[i] << "\n";
}

inline void write_psd(const std::filesystem::path& path, const metrics::PowerSpectrum& p) {
  auto out = detail::open_out(path);
  out << "# daml psd v" << kFormatVersion << " freq in cycles per model time unit, density per unit frequency\n";
  out << "freq,density\n";
  for (std::size_t i = 0; i < p.density.size(); ++i) out << p.frequencies[i] << "," << p.density[i] << "\n";
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  auto out = detail::open_out(path);
  out << j.dump(2) << "\n";
}

}  // namespace daml::harness
