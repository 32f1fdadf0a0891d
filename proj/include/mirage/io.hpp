#pragma once

// File formats: MDF1 depth frames, MLB1 label grids, ASCII PLY clouds, flat
// INI configuration and JSON results.

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "mirage/bytes.hpp"
#include "mirage/error.hpp"
#include "mirage/geometry.hpp"
#include "mirage/registration.hpp"
#include "mirage/synthetic_scene.hpp"

namespace mirage {

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "write failed: " + path.string());
}

inline std::string read_file_text(const fs::path& path) {
  const auto b = read_file_bytes(path);
  return {b.begin(), b.end()};
}

inline void write_file_text(const fs::path& path, std::string_view text) {
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

// ---------------------------------------------------------------------------
// MDF1 / MLB1

namespace detail {

inline void write_frame_header(ByteWriter& w, std::string_view magic, const CameraIntrinsics& k,
                               std::uint64_t timestamp_us, std::uint64_t sequence) {
  w.text(magic);
  w.u32(k.width);
  w.u32(k.height);
  w.f32(static_cast<float>(k.fx));
  w.f32(static_cast<float>(k.fy));
  w.f32(static_cast<float>(k.cx));
  w.f32(static_cast<float>(k.cy));
  w.u64(timestamp_us);
  w.u64(sequence);
}

struct FrameHeader {
  CameraIntrinsics intrinsics;
  std::uint64_t timestamp_us = 0;
  std::uint64_t sequence = 0;
};

inline FrameHeader read_frame_header(ByteReader& r, std::string_view magic) {
  require(r.text(4) == magic, ErrorCode::kDecode, "bad magic, expected " + std::string(magic));
  FrameHeader h;
  h.intrinsics.width = r.u32();
  h.intrinsics.height = r.u32();
  h.intrinsics.fx = r.f32();
  h.intrinsics.fy = r.f32();
  h.intrinsics.cx = r.f32();
  h.intrinsics.cy = r.f32();
  h.timestamp_us = r.u64();
  h.sequence = r.u64();
  h.intrinsics.validate();
  return h;
}

}  // namespace detail

/// MDF1: header then width*height little-endian f32 ranges. Intrinsics and
/// depths are stored in single precision.
inline std::vector<std::uint8_t> encode_mdf1(const DepthFrame& frame) {
  frame.validate();
  ByteWriter w;
  detail::write_frame_header(w, "MDF1", frame.intrinsics, frame.timestamp_us, frame.sequence);
  for (double d : frame.depth) w.f32(static_cast<float>(d));
  return w.take();
}

inline DepthFrame decode_mdf1(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto h = detail::read_frame_header(r, "MDF1");
  std::vector<double> depth(h.intrinsics.pixel_count());
  for (double& d : depth) d = r.f32();
  require(r.done(), ErrorCode::kDecode, "trailing bytes after depth grid");
  return DepthFrame::make(h.intrinsics, std::move(depth), h.timestamp_us, h.sequence);
}

inline void write_depth_frame(const fs::path& path, const DepthFrame& frame) {
  write_file_bytes(path, encode_mdf1(frame));
}

inline DepthFrame read_depth_frame(const fs::path& path) { return decode_mdf1(read_file_bytes(path)); }

/// Labels use the MDF1 header layout with magic "MLB1", then one u8 per pixel.
inline void write_labels(const fs::path& path, const GroundTruth& truth, const DepthFrame& frame) {
  require(truth.labels.size() == frame.intrinsics.pixel_count(), ErrorCode::kParameter,
          "label grid does not match the frame");
  ByteWriter w;
  detail::write_frame_header(w, "MLB1", frame.intrinsics, frame.timestamp_us, frame.sequence);
  for (Label l : truth.labels) w.u8(static_cast<std::uint8_t>(l));
  write_file_bytes(path, w.buffer());
}

inline std::vector<Label> read_labels(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  const auto h = detail::read_frame_header(r, "MLB1");
  std::vector<Label> out(h.intrinsics.pixel_count());
  for (Label& l : out) {
    const std::uint8_t v = r.u8();
    require(v <= static_cast<std::uint8_t>(Label::kBore), ErrorCode::kDecode, "unknown label value");
    l = static_cast<Label>(v);
  }
  require(r.done(), ErrorCode::kDecode, "trailing bytes after label grid");
  return out;
}

// ---------------------------------------------------------------------------
// PLY

inline void write_ply(const fs::path& path, const PointCloud& cloud) {
  std::ostringstream os;
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
     << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  os << std::setprecision(9);
  for (const auto& p : cloud.points) os << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  write_file_text(path, os.str());
}

inline PointCloud read_ply(const fs::path& path) {
  std::istringstream is(read_file_text(path));
  std::string line;
  require(std::getline(is, line) && line == "ply", ErrorCode::kDecode, path.string() + ": not a PLY file");
  std::size_t count = 0;
  bool ascii = false;
  std::vector<std::string> props;
  while (std::getline(is, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      require(name == "vertex", ErrorCode::kDecode, path.string() + ": only vertex elements are supported");
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    }
  }
  require(ascii, ErrorCode::kDecode, path.string() + ": only ASCII PLY is supported");
  require(props == std::vector<std::string>{"x", "y", "z"}, ErrorCode::kDecode,
          path.string() + ": expected exactly x, y, z properties");
  PointCloud cloud;
  cloud.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    double x = 0, y = 0, z = 0;
    require(static_cast<bool>(is >> x >> y >> z), ErrorCode::kDecode,
            path.string() + ": truncated vertex list at " + std::to_string(i));
    require(std::isfinite(x) && std::isfinite(y) && std::isfinite(z), ErrorCode::kDecode,
            path.string() + ": non-finite vertex");
    cloud.points.emplace_back(x, y, z);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Configuration

/// Flat INI file: `[section]` headers and `key = value` lines, `;` or `#`
/// comments. Unknown keys in a section that is read are an error so typos
/// do not pass silently.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "<string>") {
    Config c;
    c.origin_ = origin;
    std::istringstream is(text);
    try {
      boost::property_tree::ini_parser::read_ini(is, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      fail(ErrorCode::kConfig, origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    return c;
  }

  static Config load(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::kIo, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has_section(const std::string& section) const { return tree_.get_child_optional(section).has_value(); }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(boost::property_tree::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return *v;
  }

  /// Parses `section.key` into `out` when present; leaves `out` unchanged
  /// otherwise.
  template <typename T>
  void read(const std::string& section, const std::string& key, T& out) const {
    const auto v = raw(section, key);
    if (!v) return;
    out = convert<T>(*v, section + "." + key);
  }

  void check_keys(const std::string& section, std::initializer_list<std::string_view> known) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return;
    for (const auto& [key, value] : *sec) {
      require(std::find(known.begin(), known.end(), key) != known.end(), ErrorCode::kConfig,
              origin_ + ": unknown key " + section + "." + key);
    }
  }

  void check_sections(std::initializer_list<std::string_view> known) const {
    for (const auto& [name, sub] : tree_) {
      require(!sub.empty() || sub.data().empty(), ErrorCode::kConfig, origin_ + ": key outside a section: " + name);
      require(std::find(known.begin(), known.end(), name) != known.end(), ErrorCode::kConfig,
              origin_ + ": unknown section [" + name + "]");
    }
  }

  /// Canonical text form, used for run manifests.
  std::string dump() const {
    std::ostringstream os;
    boost::property_tree::ini_parser::write_ini(os, tree_);
    return os.str();
  }

  const std::string& origin() const { return origin_; }

 private:
  template <typename T>
  T convert(const std::string& text, const std::string& name) const {
    auto bad = [&]() { fail(ErrorCode::kConfig, origin_ + ": cannot parse " + name + " = '" + text + "'"); };
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
      if (text == "false" || text == "0" || text == "no" || text == "off") return false;
      bad();
      return false;
    } else if constexpr (std::is_same_v<T, Vec3>) {
      Vec3 v;
      std::istringstream is(text);
      char c1 = 0, c2 = 0;
      if (!(is >> v.x() >> c1 >> v.y() >> c2 >> v.z()) || c1 != ',' || c2 != ',') bad();
      return v;
    } else if constexpr (std::is_floating_point_v<T>) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(text, &used);
      } catch (const std::exception&) {
        bad();
      }
      if (used != text.size() || !std::isfinite(v)) bad();
      return static_cast<T>(v);
    } else {
      static_assert(std::is_integral_v<T>);
      T v{};
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) bad();
      return v;
    }
  }

  boost::property_tree::ptree tree_;
  std::string origin_ = "<empty>";
};

inline void read_config(const Config& c, SegmentationConfig& s) {
  c.check_keys("segmentation", {"ransac_iterations", "ransac_threshold_m", "cluster_radius_m", "cluster_min_points",
                                "seed", "bore_radius_m", "bore_fit_tolerance_m", "bore_fit_iterations"});
  c.read("segmentation", "ransac_iterations", s.ransac_iterations);
  c.read("segmentation", "ransac_threshold_m", s.ransac_threshold_m);
  c.read("segmentation", "cluster_radius_m", s.cluster_radius_m);
  c.read("segmentation", "cluster_min_points", s.cluster_min_points);
  c.read("segmentation", "seed", s.seed);
  c.read("segmentation", "bore_radius_m", s.bore_radius_m);
  c.read("segmentation", "bore_fit_tolerance_m", s.bore_fit_tolerance_m);
  c.read("segmentation", "bore_fit_iterations", s.bore_fit_iterations);
}

inline void read_config(const Config& c, RegistrationConfig& r) {
  c.check_keys("registration",
               {"validation_threshold_m", "max_icp_iterations", "convergence_eps_m", "max_correspondence_dist_m",
                "seed", "min_matched_fraction", "global_sample_count", "global_voxel_m", "descriptor_neighbors",
                "descriptor_radius_m", "normal_neighbors", "consensus_seeds", "height_gate_m", "refined_hypotheses",
                "up_prior_weight", "plane_refine_iterations"});
  c.read("registration", "validation_threshold_m", r.validation_threshold_m);
  c.read("registration", "max_icp_iterations", r.max_icp_iterations);
  c.read("registration", "convergence_eps_m", r.convergence_eps_m);
  c.read("registration", "max_correspondence_dist_m", r.max_correspondence_dist_m);
  c.read("registration", "seed", r.seed);
  c.read("registration", "min_matched_fraction", r.min_matched_fraction);
  c.read("registration", "global_sample_count", r.global_sample_count);
  c.read("registration", "global_voxel_m", r.global_voxel_m);
  c.read("registration", "descriptor_neighbors", r.descriptor_neighbors);
  c.read("registration", "descriptor_radius_m", r.descriptor_radius_m);
  c.read("registration", "normal_neighbors", r.normal_neighbors);
  c.read("registration", "consensus_seeds", r.consensus_seeds);
  c.read("registration", "height_gate_m", r.height_gate_m);
  c.read("registration", "refined_hypotheses", r.refined_hypotheses);
  c.read("registration", "up_prior_weight", r.up_prior_weight);
  c.read("registration", "plane_refine_iterations", r.plane_refine_iterations);
  r.validate();
}

inline void read_config(const Config& c, PreprocessConfig& p) {
  c.check_keys("preprocess", {"median_window", "occlusion_jump_m", "downsample_voxel_m"});
  c.read("preprocess", "median_window", p.median_window);
  c.read("preprocess", "occlusion_jump_m", p.occlusion_jump_m);
  c.read("preprocess", "downsample_voxel_m", p.downsample_voxel_m);
  if (p.median_window != 0) check_median_window(p.median_window);
}

inline void read_config(const Config& c, CameraIntrinsics& k) {
  c.check_keys("camera", {"width", "height", "fx", "fy", "cx", "cy"});
  c.read("camera", "width", k.width);
  c.read("camera", "height", k.height);
  c.read("camera", "fx", k.fx);
  c.read("camera", "fy", k.fy);
  c.read("camera", "cx", k.cx);
  c.read("camera", "cy", k.cy);
  k.validate();
}

/// Everything needed to render one scene and to build the matching models.
struct SceneSpec {
  SceneConfig scene = default_scene();
  CameraIntrinsics intrinsics;
  CameraPlacement placement;
  /// Draw the camera placement from the scene seed instead of `placement`.
  bool random_camera = false;
  std::size_t model_points = 20000;
  std::size_t patient_model_points = 5000;
  std::uint64_t model_seed = 7;

  /// Scene with the camera pose resolved.
  SceneConfig resolved() const {
    SceneConfig s = scene;
    if (random_camera) {
      Rng rng(splitmix64(scene.seed ^ 0xC0FFEEULL));
      s.camera_pose = random_placement(rng).pose(scene.scanner);
    } else {
      s.camera_pose = placement.pose(scene.scanner);
    }
    return s;
  }

  PointCloud scanner_model() const { return sample_model_cloud(scene.scanner, model_points, model_seed); }
  PointCloud patient_model() const {
    return patient_model_cloud(scene, patient_model_points, splitmix64(model_seed));
  }

  /// Couch plane in the scanner frame.
  Plane model_ground() const { return Plane{Vec3::UnitY(), scene.scanner.couch_height}; }
};

inline void read_config(const Config& c, SceneSpec& spec) {
  c.check_keys("scene", {"bore_radius_m", "bore_length_m", "face_outer_radius_m", "couch_height_m", "torso_radius_m",
                         "torso_start_z_m", "torso_end_z_m", "table_half_length_m", "table_half_width_m",
                         "noise_sigma_m", "dropout_rate", "seed", "random_camera", "camera_distance_m",
                         "camera_azimuth_deg", "camera_elevation_deg", "camera_roll_deg", "camera_target",
                         "model_points", "patient_model_points", "model_seed"});
  ScannerModel scanner;
  c.read("scene", "bore_radius_m", scanner.bore_radius);
  c.read("scene", "bore_length_m", scanner.bore_length);
  c.read("scene", "face_outer_radius_m", scanner.face_outer_radius);
  c.read("scene", "couch_height_m", scanner.couch_height);
  scanner.validate();
  SceneConfig s = default_scene(scanner);
  double torso_radius = s.torso.radius;
  double torso_a = 0.35, torso_b = 1.0;
  c.read("scene", "torso_radius_m", torso_radius);
  c.read("scene", "torso_start_z_m", torso_a);
  c.read("scene", "torso_end_z_m", torso_b);
  s.torso.radius = torso_radius;
  s.torso.a = scanner.pose(Vec3(0.0, scanner.couch_height + torso_radius, torso_a));
  s.torso.b = scanner.pose(Vec3(0.0, scanner.couch_height + torso_radius, torso_b));
  c.read("scene", "table_half_length_m", s.table.half_length);
  c.read("scene", "table_half_width_m", s.table.half_width);
  c.read("scene", "noise_sigma_m", s.noise_sigma);
  c.read("scene", "dropout_rate", s.dropout_rate);
  c.read("scene", "seed", s.seed);
  spec.scene = s;
  c.read("scene", "random_camera", spec.random_camera);
  c.read("scene", "camera_distance_m", spec.placement.distance);
  c.read("scene", "camera_azimuth_deg", spec.placement.azimuth_deg);
  c.read("scene", "camera_elevation_deg", spec.placement.elevation_deg);
  c.read("scene", "camera_roll_deg", spec.placement.roll_deg);
  c.read("scene", "camera_target", spec.placement.target);
  c.read("scene", "model_points", spec.model_points);
  c.read("scene", "patient_model_points", spec.patient_model_points);
  c.read("scene", "model_seed", spec.model_seed);
  read_config(c, spec.intrinsics);
  spec.resolved().validate();
}

inline void read_config(const Config& c, CalibrationConfig& cal) {
  c.check_keys("calibration", {"max_attempts", "model_viewpoint"});
  c.read("calibration", "max_attempts", cal.max_attempts);
  if (auto v = c.raw("calibration", "model_viewpoint")) {
    if (*v == "none") {
      cal.model_viewpoint.reset();
    } else {
      Vec3 p;
      c.read("calibration", "model_viewpoint", p);
      cal.model_viewpoint = p;
    }
  }
  read_config(c, cal.preprocess);
  read_config(c, cal.segmentation);
  read_config(c, cal.registration);
}

// ---------------------------------------------------------------------------
// JSON

using Json = nlohmann::ordered_json;

inline Json to_json(const RigidTransform& t) {
  Json rot = Json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rot.push_back(t.rotation(r, c));
  }
  return Json{{"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

inline RigidTransform transform_from_json(const Json& j) {
  try {
    RigidTransform t;
    const auto& rot = j.at("rotation");
    const auto& tr = j.at("translation");
    require(rot.size() == 9 && tr.size() == 3, ErrorCode::kDecode, "transform needs 9 + 3 numbers");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) t.rotation(r, c) = rot.at(static_cast<std::size_t>(3 * r + c)).get<double>();
    }
    t.translation = Vec3(tr.at(0).get<double>(), tr.at(1).get<double>(), tr.at(2).get<double>());
    require(t.is_valid(1e-6), ErrorCode::kDecode, "transform rotation is not a rotation");
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kDecode, std::string("transform JSON: ") + e.what());
  }
}

inline Json to_json(const RegistrationResult& r, std::size_t attempts) {
  Json j = to_json(r.transform);
  j["mean_matched_distance_m"] = r.mean_matched_distance;
  j["matched_fraction"] = r.matched_fraction;
  if (r.mean_nearest_distance) j["mean_nearest_distance_m"] = *r.mean_nearest_distance;
  j["icp_iterations"] = r.icp_iterations;
  j["global_inlier_count"] = r.global_inlier_count;
  j["elapsed_s"] = r.elapsed_s;
  j["attempts"] = attempts;
  return j;
}

inline Json to_json(const CalibrationOutcome& o) {
  Json j = to_json(o.result, o.attempts);
  j["status"] = std::string(to_string(o.status));
  if (!o.cause.empty()) j["cause"] = o.cause;
  if (o.patient_residual) j["patient_residual_m"] = *o.patient_residual;
  j["scene_points"] = o.scene_points;
  j["bore_points"] = o.bore_points;
  j["patient_points"] = o.patient_points;
  return j;
}

inline void write_ground_truth(const fs::path& path, const GroundTruth& truth) {
  Json j;
  j["camera_to_scanner"] = to_json(truth.camera_to_scanner);
  write_file_text(path, j.dump(2) + "\n");
}

inline RigidTransform read_ground_truth(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kDecode, path.string() + ": " + e.what());
  }
  require(j.contains("camera_to_scanner"), ErrorCode::kDecode, path.string() + ": missing camera_to_scanner");
  return transform_from_json(j["camera_to_scanner"]);
}

}  // namespace mirage
