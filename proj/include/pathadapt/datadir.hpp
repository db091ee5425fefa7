#pragma once

// On-disk dataset layouts used by the command-line tools. Every directory
// carries a data.json index; file paths inside it are relative to the
// directory so that copies and reruns stay byte-identical.
//
//   kind "images": {class_names, splits: {train|val|test: [{file, label}]}}
//   kind "seg":    {classes, splits: {...: [{file, mask}]}}
//   kind "slides": {class_names, slides: [{slide_id, file, label, split}]}
//   kind "bags":   {class_names, patch_px, slides: [{slide_id, label, split,
//                   width, height, records}]}, one jsonl of PatchRecords and
//                   one PPM per kept patch per slide

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathadapt/io.hpp"
#include "pathadapt/synth.hpp"
#include "pathadapt/tiling.hpp"
#include "pathadapt/trainer.hpp"

namespace pathadapt::data {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline const std::vector<std::string> kSplits{"train", "val", "test"};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class T>
io::Image8 to_image8(const Tensor<T>& im) {
  if (im.rank() != 3 || (im.dim(0) != 1 && im.dim(0) != 3))
    throw DimensionError("to_image8: expected [1|3 x H x W], got " + shape_str(im.shape()));
  io::Image8 out{im.dim(2), im.dim(1), im.dim(0), {}};
  out.pixels.resize(im.size());
  const std::size_t hw = out.width * out.height;
  for (std::size_t c = 0; c < out.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      out.pixels[i * out.channels + c] =
          std::uint8_t(std::lround(std::clamp(double(im[c * hw + i]), 0.0, 1.0) * 255.0));
  return out;
}

template <class T>
Tensor<T> from_image8(const io::Image8& im) {
  const std::size_t hw = im.width * im.height;
  Tensor<T> t({im.channels, im.height, im.width});
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) t[c * hw + i] = static_cast<T>(im.pixels[i * im.channels + c] / 255.0);
  return t;
}

inline io::Image8 raster_image(const SlideRaster& s) { return {s.width, s.height, 3, s.read(0, 0, s.width, s.height)}; }

// Box average by an integer factor down to `out` x `out`.
template <class T>
Tensor<T> box_downsample(const Tensor<T>& im, std::size_t out) {
  const std::size_t c = im.dim(0), h = im.dim(1), w = im.dim(2);
  if (h == out && w == out) return im;
  if (h != w || out == 0 || h % out != 0)
    throw DimensionError("cannot box-downsample a " + std::to_string(h) + "x" + std::to_string(w) +
                         " patch to " + std::to_string(out) + "x" + std::to_string(out));
  const std::size_t f = h / out;
  Tensor<T> r({c, out, out});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out; ++y)
      for (std::size_t x = 0; x < out; ++x) {
        double acc = 0;
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx) acc += double(im[(ch * h + y * f + dy) * w + x * f + dx]);
        r[(ch * out + y) * out + x] = static_cast<T>(acc / double(f * f));
      }
  return r;
}

inline json read_index(const fs::path& dir) {
  const fs::path p = dir / "data.json";
  if (!fs::exists(p)) throw DataError("no data.json in '" + dir.string() + "'");
  json j = io::read_json(p);
  if (j.value("format_version", 0) != kFormatVersion)
    throw DataError("'" + p.string() + "' has unsupported format_version");
  return j;
}

inline json read_index(const fs::path& dir, const std::string& kind) {
  json j = read_index(dir);
  const std::string got = j.value("kind", std::string("?"));
  if (got != kind)
    throw DataError("data directory '" + dir.string() + "' holds '" + got + "' data, expected '" + kind + "'");
  return j;
}

inline std::string image_name(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

// ---- classification images ----

template <class T>
void write_images(const fs::path& dir, const synth::SplitData<T>& d) {
  json idx{{"format_version", kFormatVersion}, {"kind", "images"}, {"class_names", d.class_names}};
  const synth::ImageSet<T>* sets[] = {&d.train, &d.val, &d.test};
  for (std::size_t s = 0; s < 3; ++s) {
    json rows = json::array();
    for (std::size_t i = 0; i < sets[s]->size(); ++i) {
      const std::string file = kSplits[s] + "/" + image_name(i) + ".ppm";
      io::write_pnm(dir / file, to_image8(sets[s]->images[i]));
      rows.push_back({{"file", file}, {"label", sets[s]->labels[i]}});
    }
    idx["splits"][kSplits[s]] = rows;
  }
  io::write_json(dir / "data.json", idx);
}

template <class T>
synth::SplitData<T> load_images(const fs::path& dir) {
  const json idx = read_index(dir, "images");
  synth::SplitData<T> d;
  d.class_names = idx.at("class_names").get<std::vector<std::string>>();
  synth::ImageSet<T>* sets[] = {&d.train, &d.val, &d.test};
  for (std::size_t s = 0; s < 3; ++s)
    for (const auto& r : idx.at("splits").at(kSplits[s])) {
      sets[s]->images.push_back(from_image8<T>(io::read_pnm(dir / r.at("file").get<std::string>())));
      sets[s]->labels.push_back(r.at("label").get<int>());
    }
  return d;
}

// Finds an image by its index path without the extension, e.g. "test/00012".
template <class T>
Tensor<T> load_named_image(const fs::path& dir, const std::string& id) {
  const json idx = read_index(dir, "images");
  for (const auto& split : kSplits)
    for (const auto& r : idx.at("splits").at(split)) {
      const std::string f = r.at("file").get<std::string>();
      if (fs::path(f).replace_extension("").string() == id) return from_image8<T>(io::read_pnm(dir / f));
    }
  throw DataError("no image '" + id + "' in '" + dir.string() + "'");
}

// ---- segmentation ----

template <class T>
void write_seg(const fs::path& dir, const SegData<T>& d) {
  json idx{{"format_version", kFormatVersion}, {"kind", "seg"}, {"classes", d.classes}};
  const synth::SegSet<T>* sets[] = {&d.train, &d.val, &d.test};
  for (std::size_t s = 0; s < 3; ++s) {
    json rows = json::array();
    for (std::size_t i = 0; i < sets[s]->images.size(); ++i) {
      const auto& im = sets[s]->images[i];
      const std::string file = kSplits[s] + "/" + image_name(i) + ".ppm";
      const std::string mask = kSplits[s] + "/" + image_name(i) + "_mask.pgm";
      io::write_pnm(dir / file, to_image8(im));
      io::Image8 m{im.dim(2), im.dim(1), 1, {}};
      for (int v : sets[s]->masks[i]) m.pixels.push_back(std::uint8_t(v));
      io::write_pnm(dir / mask, m);
      rows.push_back({{"file", file}, {"mask", mask}});
    }
    idx["splits"][kSplits[s]] = rows;
  }
  io::write_json(dir / "data.json", idx);
}

template <class T>
SegData<T> load_seg(const fs::path& dir) {
  const json idx = read_index(dir, "seg");
  SegData<T> d;
  d.classes = idx.at("classes").get<std::size_t>();
  synth::SegSet<T>* sets[] = {&d.train, &d.val, &d.test};
  for (std::size_t s = 0; s < 3; ++s)
    for (const auto& r : idx.at("splits").at(kSplits[s])) {
      sets[s]->images.push_back(from_image8<T>(io::read_pnm(dir / r.at("file").get<std::string>())));
      const auto m = io::read_pnm(dir / r.at("mask").get<std::string>());
      sets[s]->masks.emplace_back(m.pixels.begin(), m.pixels.end());
    }
  return d;
}

// ---- slides and bags ----

struct SlideCounts {
  std::size_t train = 16, val = 6, test = 8;
};

// Alternating negative/positive synthetic slides.
inline void write_slides(const fs::path& dir, const SlideCounts& n, std::size_t size, std::uint64_t seed) {
  json idx{{"format_version", kFormatVersion}, {"kind", "slides"}, {"class_names", {"negative", "positive"}}};
  idx["slides"] = json::array();
  const std::size_t counts[] = {n.train, n.val, n.test};
  std::uint64_t k = 0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < counts[s]; ++i, ++k) {
      const bool pos = i % 2 == 1;
      auto ss = synth_mil_slide(derive_seed(seed, k), pos, size);
      const std::string id = kSplits[s] + "-" + image_name(i);
      const std::string file = "slides/" + id + ".ppm";
      io::write_pnm(dir / file, raster_image(ss.slide));
      idx["slides"].push_back({{"slide_id", id}, {"file", file}, {"label", int(pos)}, {"split", kSplits[s]}});
    }
  io::write_json(dir / "data.json", idx);
}

inline SlideRaster read_slide(const fs::path& file, const std::string& id) {
  const auto im = io::read_pnm(file);
  if (im.channels != 3) throw DataError("slide '" + file.string() + "' is not an RGB PPM");
  SlideRaster s;
  s.slide_id = id;
  s.width = im.width;
  s.height = im.height;
  s.pixels = im.pixels;
  return s;
}

// Tiles one slide into `dir/<slide_id>/`: records.jsonl plus one PPM per kept
// patch named r<row>_c<col>.ppm. Returns the kept records.
inline std::vector<PatchRecord> write_tiles(const fs::path& dir, const SlideRaster& slide, const TileOptions& opt) {
  const auto recs = tile(slide, opt);
  std::vector<json> rows;
  for (const auto& r : recs) {
    const std::string file = slide.slide_id + "/r" + std::to_string(r.grid_row) + "_c" + std::to_string(r.grid_col) + ".ppm";
    io::write_pnm(dir / file, {opt.patch_px, opt.patch_px, 3, slide.read(r.x, r.y, opt.patch_px, opt.patch_px)});
    json j = to_json(r);
    j["file"] = file;
    rows.push_back(j);
  }
  io::write_jsonl(dir / slide.slide_id / "records.jsonl", rows);
  return recs;
}

inline json tile_slides(const fs::path& slides_dir, const fs::path& out, const TileOptions& opt) {
  const json src = read_index(slides_dir, "slides");
  json idx{{"format_version", kFormatVersion},
           {"kind", "bags"},
           {"class_names", src.at("class_names")},
           {"patch_px", opt.patch_px},
           {"min_tissue", opt.min_tissue},
           {"sat_threshold", opt.sat_threshold}};
  idx["slides"] = json::array();
  for (const auto& e : src.at("slides")) {
    const std::string id = e.at("slide_id").get<std::string>();
    const SlideRaster s = read_slide(slides_dir / e.at("file").get<std::string>(), id);
    const auto recs = write_tiles(out, s, opt);
    idx["slides"].push_back({{"slide_id", id},
                             {"label", e.at("label")},
                             {"split", e.at("split")},
                             {"width", s.width},
                             {"height", s.height},
                             {"patches", recs.size()},
                             {"records", id + "/records.jsonl"}});
  }
  io::write_json(out / "data.json", idx);
  return idx;
}

struct SlideInfo {
  std::string split;
  std::size_t rows = 0, cols = 0;
};

template <class T>
Bag<T> load_bag(const fs::path& dir, const json& entry, std::size_t image_size) {
  Bag<T> b;
  b.slide_id = entry.at("slide_id").get<std::string>();
  b.label = entry.at("label").get<int>();
  for (const auto& r : io::read_jsonl(dir / entry.at("records").get<std::string>())) {
    b.patches.push_back(box_downsample(from_image8<T>(io::read_pnm(dir / r.at("file").get<std::string>())), image_size));
    b.coords.push_back({r.at("grid_row").get<int>(), r.at("grid_col").get<int>()});
  }
  return b;
}

// Slides without any kept patch cannot form a bag and are skipped.
template <class T>
MilData<T> load_bags(const fs::path& dir, std::size_t image_size, std::map<std::string, SlideInfo>* info = nullptr) {
  const json idx = read_index(dir, "bags");
  MilData<T> d;
  d.class_names = idx.at("class_names").get<std::vector<std::string>>();
  const auto patch = idx.at("patch_px").get<std::size_t>();
  for (const auto& e : idx.at("slides")) {
    const std::string split = e.at("split").get<std::string>();
    if (info)
      (*info)[e.at("slide_id").get<std::string>()] = {split, e.at("height").get<std::size_t>() / patch,
                                                      e.at("width").get<std::size_t>() / patch};
    Bag<T> b = load_bag<T>(dir, e, image_size);
    if (b.size() == 0) continue;
    (split == "train" ? d.train : split == "val" ? d.val : d.test).push_back(std::move(b));
  }
  return d;
}

// Patch images for feature extraction: records.jsonl order when present,
// otherwise every .ppm in name order.
template <class T>
std::vector<Tensor<T>> load_patch_dir(fs::path dir, std::size_t image_size) {
  if (!dir.has_filename()) dir = dir.parent_path();
  std::vector<fs::path> files;
  if (fs::exists(dir / "records.jsonl")) {
    for (const auto& r : io::read_jsonl(dir / "records.jsonl"))
      files.push_back(dir.parent_path() / r.at("file").get<std::string>());
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw DataError("no patches found in '" + dir.string() + "'");
  std::vector<Tensor<T>> out;
  for (const auto& f : files) out.push_back(box_downsample(from_image8<T>(io::read_pnm(f)), image_size));
  return out;
}

}  // namespace pathadapt::data
