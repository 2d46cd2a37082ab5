/* Copyright 2026 The wmcert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Serialisation: binary and JSON checkpoints, trajectory files, and JSON
// forms of noise specs, reports and certificates.
//
// Binary checkpoint: "WMCK", u32 version, u64 header length, JSON header
// (kind, layout, model metadata), then total_dim little-endian doubles.
// Trajectory file: "WMTR", u32 version, u64 header length, JSON header
// (layout, steps, tag, learning rate), then one block of doubles per step.

#ifndef WMCERT_IO_HPP_
#define WMCERT_IO_HPP_

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wmcert/certify.hpp"
#include "wmcert/embed.hpp"
#include "wmcert/error.hpp"
#include "wmcert/params.hpp"
#include "wmcert/toymodel.hpp"
#include "wmcert/verify.hpp"

namespace wmcert::io {

using Json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary checkpoints assume a little-endian host");

inline constexpr std::uint32_t kFormatVersion = 1;

// --- JSON conversions ------------------------------------------------------

inline Json to_json(const Layout& l) { return Json(l.dims()); }
inline Layout layout_from_json(const Json& j) {
  return Layout(j.get<std::vector<std::size_t>>());
}

inline Json to_json(const LayeredParams& p) {
  Json blocks = Json::array();
  for (std::size_t l = 0; l < p.num_blocks(); ++l) {
    const auto b = p.block(l);
    blocks.push_back(std::vector<double>(b.begin(), b.end()));
  }
  return Json{{"layout", to_json(p.layout())}, {"blocks", blocks}};
}
inline LayeredParams params_from_json(const Json& j) {
  const Layout lay = layout_from_json(j.at("layout"));
  LayeredParams p(lay);
  const auto& blocks = j.at("blocks");
  require(blocks.size() == lay.num_blocks(), "checkpoint block count mismatch", ErrorKind::kIo);
  for (std::size_t l = 0; l < lay.num_blocks(); ++l) {
    const auto v = blocks[l].get<std::vector<double>>();
    require(v.size() == lay.dim(l), "checkpoint block size mismatch", ErrorKind::kIo);
    std::copy(v.begin(), v.end(), p.block(l).begin());
  }
  return p;
}

inline Json to_json(const NoiseSpec& s) {
  return Json{{"layout", to_json(s.layout)}, {"sigma", s.sigma}, {"scale", s.scale}};
}
inline NoiseSpec noise_from_json(const Json& j) {
  return NoiseSpec(layout_from_json(j.at("layout")), j.at("sigma").get<std::vector<double>>(),
                   j.value("scale", 1.0));
}

inline Json to_json(const GeneratorArch& a) {
  return Json{{"latent_dim", a.latent_dim}, {"embed_dim", a.embed_dim},
              {"num_labels", a.num_labels}, {"height", a.height},
              {"width", a.width},           {"hidden", a.hidden}};
}
inline GeneratorArch arch_from_json(const Json& j) {
  GeneratorArch a;
  a.latent_dim = j.at("latent_dim");
  a.embed_dim = j.at("embed_dim");
  a.num_labels = j.at("num_labels");
  a.height = j.at("height");
  a.width = j.at("width");
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.validate();
  return a;
}

inline Json to_json(const ClassifierConfig& c) {
  return Json{{"noise_levels", c.noise_levels}, {"mc_draws", c.mc_draws}};
}
inline ClassifierConfig classifier_config_from_json(const Json& j) {
  ClassifierConfig c;
  c.noise_levels = j.at("noise_levels").get<std::vector<double>>();
  c.mc_draws = j.at("mc_draws");
  c.validate();
  return c;
}

inline Json to_json(const stats::PairedT& t) {
  const char* status = t.status == stats::TStatus::kFinite           ? "finite"
                       : t.status == stats::TStatus::kInfiniteReject ? "infinite-reject"
                                                                     : "degenerate-non-reject";
  return Json{{"t", std::isfinite(t.t) ? Json(t.t) : Json(nullptr)},
              {"dbar", t.dbar},
              {"s_d", t.s_d},
              {"status", status}};
}

inline Json to_json(const VerificationReport& r) {
  return Json{{"wr", r.wr},
              {"rp", r.rp},
              {"per_sample_wr", r.per_sample_wr},
              {"per_sample_rp", r.per_sample_rp},
              {"M", r.M},
              {"N", r.N},
              {"alpha", r.alpha},
              {"zeta", r.zeta},
              {"tau", r.tau},
              {"threshold_feasible", r.threshold_feasible},
              {"t_statistic", to_json(r.t_test)},
              {"t_critical", r.t_critical},
              {"threshold_route", r.threshold_route},
              {"t_route", r.t_route},
              {"routes_disagree", r.routes_disagree},
              {"decision", decision_name(r.decision)}};
}

inline Json to_json(const ThresholdGrid& g) {
  return Json{{"a", g.a},         {"b", g.b},         {"s", g.s},
              {"p_lower", g.p_lower}, {"p_empirical", g.p_empirical},
              {"n", g.n},         {"delta", g.delta}};
}
inline ThresholdGrid grid_from_json(const Json& j) {
  ThresholdGrid g;
  g.a = j.at("a");
  g.b = j.at("b");
  g.s = j.at("s").get<std::vector<double>>();
  g.p_lower = j.at("p_lower").get<std::vector<double>>();
  g.p_empirical = j.value("p_empirical", std::vector<double>{});
  g.n = j.value("n", std::size_t{0});
  g.delta = j.value("delta", 0.0);
  return g;
}

inline Json to_json(const Certificate& c) {
  return Json{{"grid", to_json(c.grid)},
              {"tau", c.tau},
              {"zeta", c.zeta},
              {"rp", c.rp},
              {"wr", c.wr},
              {"k", c.k},
              {"r_star", c.r_star},
              {"certified", c.certified},
              {"status", c.status},
              {"confidence", c.confidence},
              {"delta_grid", c.delta_grid},
              {"delta_zeta", c.delta_zeta},
              {"lhs_at_r_star", c.lhs_at_r_star},
              {"tolerance", c.tolerance},
              {"seed", c.seed},
              {"config",
               {{"prompt", c.config.query.prompt},
                {"target", c.config.query.target},
                {"M", c.config.query.M},
                {"N", c.config.query.N},
                {"grid_size", c.config.grid_size},
                {"alpha", c.config.alpha},
                {"delta", c.config.delta},
                {"tolerance", c.config.tolerance}}},
              {"noise", to_json(c.noise)}};
}
inline Certificate certificate_from_json(const Json& j) {
  Certificate c;
  c.grid = grid_from_json(j.at("grid"));
  c.tau = j.at("tau");
  c.zeta = j.at("zeta");
  c.rp = j.at("rp");
  c.wr = j.at("wr");
  c.k = j.at("k");
  c.r_star = j.at("r_star");
  c.certified = j.at("certified");
  c.status = j.at("status");
  c.confidence = j.at("confidence");
  c.delta_grid = j.at("delta_grid");
  c.delta_zeta = j.at("delta_zeta");
  c.lhs_at_r_star = j.at("lhs_at_r_star");
  c.tolerance = j.at("tolerance");
  c.seed = j.at("seed");
  const auto& cf = j.at("config");
  c.config.query.prompt = cf.at("prompt");
  c.config.query.target = cf.at("target");
  c.config.query.M = cf.at("M");
  c.config.query.N = cf.at("N");
  c.config.grid_size = cf.at("grid_size");
  c.config.alpha = cf.at("alpha");
  c.config.delta = cf.at("delta");
  c.config.tolerance = cf.at("tolerance");
  c.noise = noise_from_json(j.at("noise"));
  return c;
}

inline Json to_json(const EmbedLogRecord& r) {
  return Json{{"t", r.t},   {"m_t", r.m},       {"omega_t", r.omega},
              {"kl", r.kl}, {"ssim", r.ssim}, {"grad_norm", r.grad_norm}};
}

// --- files -----------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for '" + path + "'");
}

inline Json read_json(const std::string& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    fail(ErrorKind::kIo, "malformed JSON in '" + path + "': " + e.what());
  }
}

inline void write_json(const std::string& path, const Json& j) {
  write_file(path, j.dump(2) + "\n");
}

namespace detail {

template <class T>
void put(std::string& out, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(ErrorKind::kIo, "truncated binary file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::string frame(const char magic[4], const Json& header) {
  std::string out(magic, 4);
  put(out, kFormatVersion);
  const std::string h = header.dump();
  put(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  return out;
}

inline Json unframe(const std::string& in, const char magic[4], std::size_t& pos) {
  if (in.size() < 4 || in.compare(0, 4, magic, 4) != 0)
    fail(ErrorKind::kIo, std::string("not a ") + std::string(magic, 4) + " file");
  pos = 4;
  const auto version = take<std::uint32_t>(in, pos);
  if (version != kFormatVersion)
    fail(ErrorKind::kIo, "unsupported format version " + std::to_string(version));
  const auto len = take<std::uint64_t>(in, pos);
  if (pos + len > in.size()) fail(ErrorKind::kIo, "truncated header");
  Json h = Json::parse(in.substr(pos, len));
  pos += len;
  return h;
}

inline void put_doubles(std::string& out, std::span<const double> v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

inline void take_doubles(const std::string& in, std::size_t& pos, std::span<double> v) {
  const std::size_t bytes = v.size() * sizeof(double);
  if (pos + bytes > in.size()) fail(ErrorKind::kIo, "truncated parameter data");
  std::memcpy(v.data(), in.data() + pos, bytes);
  pos += bytes;
}

}  // namespace detail

/// A checkpoint is parameters plus a JSON header describing the model.
struct Checkpoint {
  Json header;  // contains "kind" and "layout"
  LayeredParams params;
};

inline std::string encode_binary(const Checkpoint& c) {
  Json h = c.header;
  h["layout"] = to_json(c.params.layout());
  std::string out = detail::frame("WMCK", h);
  detail::put_doubles(out, c.params.flat());
  return out;
}

inline Checkpoint decode_binary(const std::string& bytes) {
  std::size_t pos = 0;
  Checkpoint c;
  c.header = detail::unframe(bytes, "WMCK", pos);
  c.params = LayeredParams(layout_from_json(c.header.at("layout")));
  detail::take_doubles(bytes, pos, c.params.flat());
  if (pos != bytes.size()) fail(ErrorKind::kIo, "trailing bytes after checkpoint data");
  return c;
}

inline Json encode_json(const Checkpoint& c) {
  Json j = c.header;
  j["layout"] = to_json(c.params.layout());
  j["params"] = to_json(c.params);
  j["format_version"] = kFormatVersion;
  return j;
}

inline Checkpoint decode_json(const Json& j) {
  Checkpoint c;
  c.header = j;
  c.header.erase("params");
  c.header.erase("format_version");
  c.params = params_from_json(j.at("params"));
  return c;
}

/// Loads either form; JSON is recognised by a leading '{'.
inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (!bytes.empty() && bytes[0] == '{') {
    try {
      return decode_json(Json::parse(bytes));
    } catch (const Json::exception& e) {
      fail(ErrorKind::kIo, "malformed JSON checkpoint '" + path + "': " + e.what());
    }
  }
  return decode_binary(bytes);
}

/// Writes JSON when the path ends in ".json", binary otherwise.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0)
    write_json(path, encode_json(c));
  else
    write_file(path, encode_binary(c));
}

inline Checkpoint generator_checkpoint(const ToyGenerator& g) {
  return {Json{{"kind", "generator"}, {"arch", to_json(g.arch())}}, g.params()};
}

inline ToyGenerator generator_from_checkpoint(const Checkpoint& c) {
  require(c.header.value("kind", "") == "generator", "checkpoint is not a generator",
          ErrorKind::kIo);
  return ToyGenerator(arch_from_json(c.header.at("arch")), c.params);
}

inline Checkpoint classifier_checkpoint(const EnergyClassifier& c) {
  return {Json{{"kind", "classifier"},
               {"num_labels", c.predictor().num_labels()},
               {"dim", c.predictor().dim()},
               {"config", to_json(c.config())}},
          c.predictor().params()};
}

inline EnergyClassifier classifier_from_checkpoint(const Checkpoint& c) {
  require(c.header.value("kind", "") == "classifier", "checkpoint is not a classifier",
          ErrorKind::kIo);
  return EnergyClassifier(
      PrototypeDenoiser(c.header.at("num_labels"), c.header.at("dim"), c.params),
      classifier_config_from_json(c.header.at("config")));
}

inline std::string encode_trajectory(const TrainingTrajectory& t) {
  std::vector<std::int64_t> steps;
  for (const auto& s : t.snapshots()) steps.push_back(s.step);
  Json h{{"layout", to_json(t.layout())},
         {"steps", steps},
         {"dataset_tag", t.dataset_tag()},
         {"learning_rate", t.learning_rate()}};
  std::string out = detail::frame("WMTR", h);
  for (const auto& s : t.snapshots()) detail::put_doubles(out, s.params.flat());
  return out;
}

inline TrainingTrajectory decode_trajectory(const std::string& bytes) {
  std::size_t pos = 0;
  const Json h = detail::unframe(bytes, "WMTR", pos);
  const Layout lay = layout_from_json(h.at("layout"));
  std::vector<Snapshot> snaps;
  for (auto step : h.at("steps").get<std::vector<std::int64_t>>()) {
    LayeredParams p(lay);
    detail::take_doubles(bytes, pos, p.flat());
    snaps.push_back({step, std::move(p)});
  }
  return TrainingTrajectory(std::move(snaps), h.value("dataset_tag", ""),
                            h.value("learning_rate", 0.0));
}

}  // namespace wmcert::io

#endif  // WMCERT_IO_HPP_
