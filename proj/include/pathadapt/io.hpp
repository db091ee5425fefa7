#pragma once

// On-disk formats. Checkpoint: "PACKPT01", u64 LE manifest length, JSON
// manifest, then the little-endian f32 blob. Feature file: "PAFEAT01", u32 LE
// header length, JSON header, then row-major f32 rows. Images: binary
// PGM (P5) and PPM (P6), maxval 255.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathadapt/tensor.hpp"
#include "pathadapt/vit.hpp"

namespace pathadapt::io {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + p.string());
}

namespace detail {
template <class U>
void put_le(std::string& s, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) s.push_back(char((std::uint64_t(v) >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const std::string& s, std::size_t at) {
  if (at + sizeof(U) > s.size()) throw FormatError("truncated integer field");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(std::uint8_t(s[at + i])) << (8 * i);
  return U(v);
}

inline void put_f32(std::string& s, float f) { put_le(s, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const std::string& s, std::size_t at) {
  return std::bit_cast<float>(get_le<std::uint32_t>(s, at));
}
}  // namespace detail

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
  bool frozen = false;
};

struct Checkpoint {
  static constexpr const char* kMagic = "PACKPT01";
  static constexpr int kFormatVersion = 1;

  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const NamedTensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }

  template <class T>
  void add(const std::string& name, const Tensor<T>& t, bool frozen) {
    tensors.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end()), frozen});
  }

  nlohmann::json manifest() const {
    nlohmann::json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config;
    j["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
      const std::uint64_t len = t.data.size() * 4;
      j["tensors"].push_back({{"name", t.name},
                              {"shape", t.shape},
                              {"dtype", "f32"},
                              {"offset", offset},
                              {"length", len},
                              {"frozen", t.frozen}});
      offset += len;
    }
    return j;
  }

  std::string to_bytes() const {
    const std::string m = manifest().dump();
    std::string s(kMagic);
    detail::put_le<std::uint64_t>(s, m.size());
    s += m;
    for (const auto& t : tensors)
      for (float f : t.data) detail::put_f32(s, f);
    return s;
  }

  static Checkpoint from_bytes(const std::string& s) {
    if (s.size() < 16 || s.compare(0, 8, kMagic) != 0) throw FormatError("not a checkpoint file");
    const auto mlen = detail::get_le<std::uint64_t>(s, 8);
    if (16 + mlen > s.size()) throw FormatError("checkpoint manifest truncated");
    const auto m = nlohmann::json::parse(s.substr(16, mlen));
    if (m.at("format_version").get<int>() != kFormatVersion)
      throw FormatError("unsupported checkpoint format_version " + m.at("format_version").dump());
    Checkpoint c;
    c.config = m.at("config");
    const std::size_t base = 16 + mlen;
    std::uint64_t expect = 0;
    for (const auto& e : m.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      t.frozen = e.at("frozen").get<bool>();
      if (e.at("dtype").get<std::string>() != "f32")
        throw FormatError("tensor '" + t.name + "' has unsupported dtype");
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("length").get<std::uint64_t>();
      if (off != expect || len != numel(t.shape) * 4)
        throw FormatError("tensor '" + t.name + "' has inconsistent offset/length");
      if (base + off + len > s.size()) throw FormatError("tensor '" + t.name + "' truncated");
      t.data.resize(numel(t.shape));
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = detail::get_f32(s, base + off + 4 * i);
      expect = off + len;
      c.tensors.push_back(std::move(t));
    }
    if (base + expect != s.size()) throw FormatError("checkpoint has trailing bytes");
    return c;
  }

  void save(const std::filesystem::path& p) const { write_file(p, to_bytes()); }
  static Checkpoint load(const std::filesystem::path& p) { return from_bytes(read_file(p)); }
};

inline nlohmann::json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"dim", c.dim},
          {"depth", c.depth},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
          {"channels", c.channels}};
}

// Missing keys keep their defaults.
inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.dim = j.value("dim", c.dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.channels = j.value("channels", c.channels);
  c.validate();
  return c;
}

template <class T>
void copy_into(Tensor<T>& dst, const NamedTensor& src) {
  if (dst.shape() != src.shape)
    throw FormatError("tensor '" + src.name + "' has shape " + shape_str(src.shape) + ", expected " +
                      shape_str(dst.shape()));
  auto& v = dst.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(src.data[i]);
}

// Backbone tensors, all flagged frozen; config echo under "backbone".
template <class T>
Checkpoint backbone_checkpoint(const ViT<T>& vit, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint c;
  c.config = std::move(extra);
  c.config["backbone"] = to_json(vit.config());
  for (const auto& [name, t] : vit.named_parameters()) c.add(name, t, true);
  return c;
}

template <class T>
ViT<T> load_backbone(const Checkpoint& c) {
  if (!c.config.contains("backbone")) throw FormatError("checkpoint carries no backbone config");
  ViT<T> vit(vit_config_from_json(c.config.at("backbone")), 0);
  for (auto& [name, t] : vit.named_parameters()) {
    Tensor<T> h = t;
    copy_into(h, c.at(name));
  }
  return vit;
}

// Copies stored values into same-named tensors; every name must be present.
template <class T>
void load_named(const Checkpoint& c, const std::vector<std::pair<std::string, Tensor<T>>>& dst) {
  for (const auto& [name, t] : dst) {
    Tensor<T> h = t;
    copy_into(h, c.at(name));
  }
}

struct FeatureFile {
  static constexpr const char* kMagic = "PAFEAT01";

  std::size_t n_rows = 0;
  std::size_t dim = 0;
  std::string slide_id;
  std::vector<std::string> class_names;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<float> rows;

  std::string to_bytes() const {
    if (rows.size() != n_rows * dim) throw FormatError("feature rows do not match header size");
    nlohmann::json h{{"n_rows", n_rows}, {"dim", dim}};
    if (!slide_id.empty()) h["slide_id"] = slide_id;
    if (!class_names.empty()) h["class_names"] = class_names;
    if (!extra.empty()) h["extra"] = extra;
    const std::string hs = h.dump();
    std::string s(kMagic);
    detail::put_le<std::uint32_t>(s, std::uint32_t(hs.size()));
    s += hs;
    for (float f : rows) detail::put_f32(s, f);
    return s;
  }

  static FeatureFile from_bytes(const std::string& s) {
    if (s.size() < 12 || s.compare(0, 8, kMagic) != 0) throw FormatError("not a feature file");
    const auto hl = detail::get_le<std::uint32_t>(s, 8);
    if (12 + std::size_t(hl) > s.size()) throw FormatError("feature header truncated");
    const auto h = nlohmann::json::parse(s.substr(12, hl));
    FeatureFile f;
    f.n_rows = h.at("n_rows").get<std::size_t>();
    f.dim = h.at("dim").get<std::size_t>();
    f.slide_id = h.value("slide_id", std::string());
    f.class_names = h.value("class_names", std::vector<std::string>{});
    f.extra = h.value("extra", nlohmann::json::object());
    const std::size_t base = 12 + hl;
    if (s.size() != base + f.n_rows * f.dim * 4)
      throw FormatError("feature file length " + std::to_string(s.size()) +
                        " disagrees with its header");
    f.rows.resize(f.n_rows * f.dim);
    for (std::size_t i = 0; i < f.rows.size(); ++i) f.rows[i] = detail::get_f32(s, base + 4 * i);
    return f;
  }

  void save(const std::filesystem::path& p) const { write_file(p, to_bytes()); }
  static FeatureFile load(const std::filesystem::path& p) { return from_bytes(read_file(p)); }
};

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 (PGM) or 3 (PPM)
  std::vector<std::uint8_t> pixels;
};

inline std::string encode_pnm(const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw FormatError("PNM needs 1 or 3 channels");
  if (im.pixels.size() != im.width * im.height * im.channels)
    throw FormatError("image buffer size disagrees with its dimensions");
  std::string s = (im.channels == 1 ? "P5\n" : "P6\n") + std::to_string(im.width) + " " +
                  std::to_string(im.height) + "\n255\n";
  s.append(reinterpret_cast<const char*>(im.pixels.data()), im.pixels.size());
  return s;
}

inline Image8 decode_pnm(const std::string& s) {
  std::istringstream in(s);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw FormatError("not a binary PGM/PPM image");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw FormatError("bad PNM header");
    return std::size_t(v);
  };
  Image8 im;
  im.channels = magic == "P5" ? 1 : 3;
  im.width = next_int();
  im.height = next_int();
  if (next_int() != 255) throw FormatError("only maxval 255 is supported");
  in.get();  // single whitespace byte before the raster
  const auto at = std::size_t(in.tellg());
  const std::size_t n = im.width * im.height * im.channels;
  if (s.size() - at != n) throw FormatError("PNM raster has the wrong size");
  im.pixels.assign(s.begin() + long(at), s.end());
  return im;
}

inline void write_pnm(const std::filesystem::path& p, const Image8& im) { write_file(p, encode_pnm(im)); }
inline Image8 read_pnm(const std::filesystem::path& p) { return decode_pnm(read_file(p)); }

inline void write_jsonl(const std::filesystem::path& p, const std::vector<nlohmann::json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  write_file(p, s);
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& p) {
  std::istringstream in(read_file(p));
  std::vector<nlohmann::json> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  write_file(p, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& p) { return nlohmann::json::parse(read_file(p)); }

}  // namespace pathadapt::io
