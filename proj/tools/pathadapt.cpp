// pathadapt: pipeline front end.
//
//   pretrain-toy -> synth-data -> tile -> extract-features / adapt -> compare -> heatmap
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pathadapt/pathadapt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pathadapt;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  try {
    return io::read_json(path);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
}

template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad configuration: ") + e.what());
  }
}

// Path of `target` as seen from directory `from`, for manifests that must not
// depend on where the work tree lives.
std::string rel(const fs::path& target, const fs::path& from) {
  return fs::relative(fs::absolute(target), fs::absolute(from.empty() ? fs::path(".") : from)).generic_string();
}

void require_file(const std::string& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p);
}

// ---- pretrain-toy ----

struct PretrainArgs {
  std::string config, out;
  bool verbose = false;
};

void cmd_pretrain(const PretrainArgs& a) {
  const PretrainConfig pc = as_usage([&] { return PretrainConfig::from_json(load_config(a.config)); });
  RunHooks hooks;
  if (a.verbose)
    hooks.on_epoch = [](std::uint64_t, std::size_t epoch, double loss, double) {
      std::cerr << "pretrain epoch " << epoch << " loss " << loss << "\n";
    };
  ViT<float> vit = pretrain_toy<float>(pc, hooks);
  io::backbone_checkpoint(vit, {{"pretrain", pc.to_json()}}).save(a.out);
  std::cout << "wrote " << a.out << " (" << ViT<float>::parameter_tensor_count(pc.vit) << " tensors, hash "
            << backbone_hash(vit) << ")\n";
}

// ---- synth-data ----

struct SynthArgs {
  std::string task = "roi", family = "B", out;
  std::size_t train = 0, val = 0, test = 0, size = 0;  // 0 picks the task default
  std::uint64_t seed = 0;
};

void cmd_synth(SynthArgs a) {
  const bool slides = a.task == "slides";
  const data::SlideCounts sc;
  if (!a.train) a.train = slides ? sc.train : 800;
  if (!a.val) a.val = slides ? sc.val : 200;
  if (!a.test) a.test = slides ? sc.test : 400;
  fs::create_directories(a.out);
  if (a.task == "roi") {
    if (a.family != "A" && a.family != "B") throw UsageError("family must be A or B");
    const auto fam = a.family == "A" ? synth::Family::A : synth::Family::B;
    const std::size_t size = a.size ? a.size : toy_vit_config().image_size;
    data::write_images(a.out, synth::make_splits<float>(fam, a.train, a.val, a.test, size, a.seed));
  } else if (a.task == "seg") {
    const std::size_t size = a.size ? a.size : toy_vit_config().image_size;
    SegData<float> d;
    d.train = synth::make_seg_set<float>(a.train, size, derive_seed(a.seed, 1));
    d.val = synth::make_seg_set<float>(a.val, size, derive_seed(a.seed, 2));
    d.test = synth::make_seg_set<float>(a.test, size, derive_seed(a.seed, 3));
    data::write_seg(a.out, d);
  } else if (a.task == "slides") {
    data::write_slides(a.out, {a.train, a.val, a.test}, a.size ? a.size : 256, a.seed);
  } else {
    throw UsageError("synth-data task must be roi, seg or slides");
  }
  std::cout << "wrote " << (fs::path(a.out) / "data.json").string() << "\n";
}

// ---- tile ----

struct TileArgs {
  std::string slides, slide, out;
  TileOptions opt;
};

void cmd_tile(const TileArgs& a) {
  if (a.slides.empty() == a.slide.empty()) throw UsageError("tile needs exactly one of --slides DIR or --slide FILE");
  as_usage([&] {
    a.opt.validate();
    return 0;
  });
  fs::create_directories(a.out);
  if (!a.slides.empty()) {
    auto idx = data::tile_slides(a.slides, a.out, a.opt);
    std::size_t n = 0;
    for (const auto& s : idx.at("slides")) n += s.at("patches").get<std::size_t>();
    std::cout << "tiled " << idx.at("slides").size() << " slides into " << n << " patches\n";
  } else {
    require_file(a.slide, "slide");
    const auto s = data::read_slide(a.slide, fs::path(a.slide).stem().string());
    const auto recs = data::write_tiles(a.out, s, a.opt);
    std::cout << "kept " << recs.size() << " patches of " << (s.width / a.opt.patch_px) * (s.height / a.opt.patch_px)
              << "\n";
  }
}

// ---- extract-features ----

struct ExtractArgs {
  std::string base, patches, out;
};

void cmd_extract(const ExtractArgs& a) {
  require_file(a.base, "base checkpoint");
  const ViT<float> vit = io::load_backbone<float>(io::Checkpoint::load(a.base));
  const auto ims = data::load_patch_dir<float>(a.patches, vit.config().image_size);
  io::FeatureFile f;
  f.dim = vit.config().dim;
  f.n_rows = ims.size();
  f.slide_id = fs::path(a.patches).lexically_normal().filename().string();
  if (f.slide_id.empty()) f.slide_id = fs::path(a.patches).lexically_normal().parent_path().filename().string();
  f.extra = {{"backbone_hash", std::to_string(backbone_hash(vit))}};
  const Tensor<float> e = frozen_embeddings(vit, ims);
  f.rows = e.values();
  f.save(a.out);
  std::cout << "wrote " << f.n_rows << " x " << f.dim << " features to " << a.out << "\n";
}

// ---- adapt ----

struct AdaptArgs {
  std::string base, task, pathfit = "on", data, out, config, seeds, head;
  std::size_t sample_k = 0, epochs = 0, shots = 0, rank = 0, batch = 0;
  double lr = 0;
  bool verbose = false;
};

TrainConfig adapt_config(const AdaptArgs& a) {
  return as_usage([&] {
    json j = load_config(a.config);
    if (!a.task.empty()) j["task"] = a.task;
    TrainConfig c = TrainConfig::from_json(j);
    if (a.pathfit != "on" && a.pathfit != "off") throw std::invalid_argument("--pathfit must be on or off");
    c.pathfit_enabled = a.pathfit == "on";
    if (a.sample_k) c.mil_sample_k = a.sample_k;
    if (a.epochs) c.epochs = a.epochs;
    if (a.shots) c.shots = a.shots;
    if (a.rank) c.adapter_rank = a.rank;
    if (a.batch) c.batch_size = a.batch;
    if (a.lr > 0) c.optim.lr = a.lr;
    if (!a.head.empty()) c.head = a.head;
    if (!a.seeds.empty()) {
      c.seeds.clear();
      std::stringstream ss(a.seeds);
      for (std::string t; std::getline(ss, t, ',');) c.seeds.push_back(std::stoull(t));
    }
    if (const char* env = std::getenv("PATHADAPT_SEED"); env && *env) c.seeds = {std::stoull(env)};
    c.validate();
    return c;
  });
}

void cmd_adapt(const AdaptArgs& a) {
  const TrainConfig cfg = adapt_config(a);
  require_file(a.base, "base checkpoint");
  if (!fs::is_directory(a.data)) throw UsageError("data directory not found: " + a.data);
  const auto base_ckpt = io::Checkpoint::load(a.base);
  const ViT<float> base = io::load_backbone<float>(base_ckpt);
  RunHooks hooks;
  if (a.verbose)
    hooks.on_epoch = [](std::uint64_t seed, std::size_t epoch, double loss, double val) {
      std::cerr << "seed " << seed << " epoch " << epoch << " loss " << loss << " val " << val << "\n";
    };

  ExperimentResult res;
  std::vector<std::string> class_names;
  try {
    switch (cfg.task) {
      case TaskKind::roi:
      case TaskKind::fewshot: {
        auto d = data::load_images<float>(a.data);
        class_names = d.class_names;
        res = run_roi(cfg, d, base, hooks);
        break;
      }
      case TaskKind::seg: {
        auto d = data::load_seg<float>(a.data);
        for (std::size_t c = 0; c < d.classes; ++c) class_names.push_back("class " + std::to_string(c));
        res = run_seg(cfg, d, base, hooks);
        break;
      }
      case TaskKind::mil: {
        auto d = data::load_bags<float>(a.data, base.config().image_size);
        class_names = d.class_names;
        res = run_mil(cfg, d, base, hooks);
        break;
      }
    }
  } catch (const data::DataError& e) {
    throw UsageError(std::string("task '") + to_string(cfg.task) + "': " + e.what());
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  json m{{"format_version", 1},
         {"command", "adapt"},
         {"task", to_string(cfg.task)},
         {"pathfit", cfg.pathfit_enabled},
         {"base", rel(a.base, out)},
         {"base_hash", std::to_string(backbone_hash(base))},
         {"data", rel(a.data, out)},
         {"class_names", class_names},
         {"config", cfg.to_json()},
         {"config_hash", std::to_string(cfg.hash())},
         {"metrics", "metrics.json"}};
  if (cfg.task == TaskKind::mil) m["mil_sample_k"] = cfg.mil_sample_k;
  m["seeds"] = json::array();
  for (const auto& s : res.seeds) {
    const std::string dir = "seed_" + std::to_string(s.seed);
    s.trained.save(out / dir / "trained.ckpt");
    s.backbone.save(out / dir / "backbone.ckpt");
    m["seeds"].push_back({{"seed", s.seed},
                          {"best_epoch", s.best_epoch},
                          {"val_history", s.val_history},
                          {"metrics", s.metrics},
                          {"trained", dir + "/trained.ckpt"},
                          {"backbone", dir + "/backbone.ckpt"}});
  }
  io::write_json(out / "metrics.json", res.report.to_json());
  io::write_json(out / "manifest.json", m);
  std::cout << res.report.table(cfg.pathfit_enabled ? "PathFiT enabled" : "PathFiT disabled");
}

// ---- compare ----

struct CompareArgs {
  std::string run_a, run_b, out;
};

void cmd_compare(const CompareArgs& a) {
  auto load = [](const std::string& dir, bool& pathfit) {
    const fs::path d(dir);
    if (!fs::exists(d / "metrics.json")) throw UsageError("no metrics.json in run directory " + dir);
    pathfit = false;
    if (fs::exists(d / "manifest.json")) pathfit = io::read_json(d / "manifest.json").value("pathfit", false);
    return metrics::MetricsReport::from_json(io::read_json(d / "metrics.json"));
  };
  bool pa = false, pb = false;
  auto ra = load(a.run_a, pa), rb = load(a.run_b, pb);
  // The run with PathFiT disabled is the baseline whichever order they come in.
  const bool swap = pa && !pb;
  json j = as_usage([&] { return swap ? compare_reports(rb, ra) : compare_reports(ra, rb); });
  j["baseline_run"] = swap ? a.run_b : a.run_a;
  j["adapted_run"] = swap ? a.run_a : a.run_b;
  if (!a.out.empty()) {
    j["baseline_run"] = rel(j["baseline_run"].get<std::string>(), fs::path(a.out).parent_path());
    j["adapted_run"] = rel(j["adapted_run"].get<std::string>(), fs::path(a.out).parent_path());
    io::write_json(a.out, j);
  }
  std::cout << j.dump(2) << "\n";
}

// ---- heatmap ----

struct HeatmapArgs {
  std::string run, slide, mode = "mil-attn", out;
  std::size_t seed_index = 0;
};

struct LoadedRun {
  json manifest;
  fs::path dir, data;
  TrainConfig cfg;
  ViT<float> base;
  std::uint64_t seed = 0;
  io::Checkpoint trained;
};

LoadedRun load_run(const HeatmapArgs& a) {
  LoadedRun r;
  r.dir = a.run;
  if (!fs::exists(r.dir / "manifest.json")) throw UsageError("no manifest.json in run directory " + a.run);
  r.manifest = io::read_json(r.dir / "manifest.json");
  r.cfg = TrainConfig::from_json(r.manifest.at("config"));
  r.data = r.dir / r.manifest.at("data").get<std::string>();
  r.base = io::load_backbone<float>(io::Checkpoint::load(r.dir / r.manifest.at("base").get<std::string>()));
  const auto& seeds = r.manifest.at("seeds");
  if (a.seed_index >= seeds.size()) throw UsageError("run has only " + std::to_string(seeds.size()) + " seeds");
  r.seed = seeds[a.seed_index].at("seed").get<std::uint64_t>();
  r.trained = io::Checkpoint::load(r.dir / seeds[a.seed_index].at("trained").get<std::string>());
  return r;
}

// Final-layer class-token attention of each patch image, placed in a grid of
// g x g cells per patch.
Heatmap cls_attention_map(const ViT<float>& vit, bool adapters, const std::vector<Tensor<float>>& ims,
                          const std::vector<GridPos>& coords, std::size_t rows, std::size_t cols) {
  const std::size_t g = vit.config().grid(), t = vit.config().num_patches(), last = vit.config().depth - 1;
  std::vector<GridPos> cells;
  std::vector<double> scores;
  NoGradGuard ng;
  for (std::size_t i = 0; i < ims.size(); ++i) {
    const auto out = vit.forward(vit.embed_patches(ims[i]), adapters, true);
    for (std::size_t j = 0; j < t; ++j) {
      cells.push_back({coords[i].row * int(g) + int(j / g), coords[i].col * int(g) + int(j % g)});
      scores.push_back(out.attn_maps[0].at(last, j));
    }
  }
  return build_heatmap(cells, scores, rows * g, cols * g);
}

void cmd_heatmap(const HeatmapArgs& a) {
  if (a.mode != "cls-attn" && a.mode != "mil-attn") throw UsageError("--mode must be cls-attn or mil-attn");
  LoadedRun r = load_run(a);
  Heatmap h;
  if (r.cfg.task == TaskKind::mil) {
    std::map<std::string, data::SlideInfo> info;
    const json idx = data::read_index(r.data, "bags");
    const json* entry = nullptr;
    for (const auto& e : idx.at("slides"))
      if (e.at("slide_id") == a.slide) entry = &e;
    if (!entry) throw std::runtime_error("unknown slide '" + a.slide + "' in " + r.data.string());
    const auto patch = idx.at("patch_px").get<std::size_t>();
    const std::size_t rows = entry->at("height").get<std::size_t>() / patch;
    const std::size_t cols = entry->at("width").get<std::size_t>() / patch;
    const Bag<float> bag = data::load_bag<float>(r.data, *entry, r.base.config().image_size);
    if (bag.size() == 0) throw std::runtime_error("slide '" + a.slide + "' has no tissue patches");
    MilModel<float> model(r.base, r.cfg, idx.at("class_names").size(), r.seed);
    io::load_named(r.trained, model.trainable());
    if (a.mode == "mil-attn") {
      FeatureCache<float> cache;
      h = export_heatmap(bag, model.infer(bag, cache).weights, rows, cols);
    } else {
      h = cls_attention_map(model.vit, model.pathfit, bag.patches, bag.coords, rows, cols);
    }
  } else if (r.cfg.task == TaskKind::roi || r.cfg.task == TaskKind::fewshot) {
    if (a.mode == "mil-attn") throw UsageError("mil-attn needs a run of task mil");
    const auto names = r.manifest.at("class_names").get<std::vector<std::string>>();
    RoiModel<float> model(r.base, r.cfg, names, r.seed);
    io::load_named(r.trained, model.trainable());
    const Tensor<float> im = [&] {
      try {
        return data::load_named_image<float>(r.data, a.slide);
      } catch (const data::DataError& e) {
        throw std::runtime_error(std::string("unknown slide: ") + e.what());
      }
    }();
    h = cls_attention_map(model.vit, model.pathfit, {im}, {{0, 0}}, 1, 1);
  } else {
    throw UsageError("heatmaps are available for roi, fewshot and mil runs");
  }
  io::write_pnm(a.out, {h.cols, h.rows, 1, heatmap_gray(h)});
  io::write_json(a.out + ".json", {{"slide", a.slide},
                                   {"mode", a.mode},
                                   {"seed", r.seed},
                                   {"rows", h.rows},
                                   {"cols", h.cols},
                                   {"raw", h.raw},
                                   {"norm", h.norm},
                                   {"coverage", h.coverage}});
  std::cout << "wrote " << h.rows << "x" << h.cols << " heatmap to " << a.out << "\n";
}

// ---- count-params ----

struct CountArgs {
  std::string config;
  ViTConfig vit;
  std::size_t rank = 64;
  float alpha = 1.0f;
  std::string targets = "qkvo";
  std::size_t classes = 0;
};

void cmd_count(CountArgs a) {
  const json j = load_config(a.config);
  const ViTConfig vc = as_usage([&] { return j.empty() ? (a.vit.validate(), a.vit) : io::vit_config_from_json(j); });
  AdapterConfig ac;
  as_usage([&] {
    ac.rank = a.rank;
    ac.alpha = a.alpha;
    ac.targets = AdapterConfig::parse_targets(a.targets);
    ac.validate();
    return 0;
  });
  const std::size_t head = a.classes ? a.classes * (vc.dim + 1) : 0;
  const ParamCount pc = count_params(vc, ac, head);
  const json out{{"adapter", pc.adapter},
                 {"per_layer", adapter_params_per_layer(ac.rank, vc.dim, vc.dim)},
                 {"adapted_layers", vc.depth * ac.target_count()},
                 {"backbone", pc.total - pc.adapter - head},
                 {"head", head},
                 {"total", pc.total},
                 {"trainable", pc.trainable},
                 {"trainable_ratio", pc.ratio()}};
  std::cout << out.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank adaptation of frozen vision transformers for pathology-style data"};
  app.require_subcommand(1);

  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain-toy", "Train the toy backbone on synthetic family-A textures");
  c_pre->add_option("--config", pre.config, "JSON pretraining config (defaults when omitted)");
  c_pre->add_option("--out", pre.out, "Output checkpoint")->required();
  c_pre->add_flag("-v,--verbose", pre.verbose);

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth-data", "Write a synthetic dataset directory");
  c_syn->add_option("--task", syn.task, "roi, seg or slides")->capture_default_str();
  c_syn->add_option("--family", syn.family, "Texture family for roi data (A or B)")->capture_default_str();
  c_syn->add_option("--train", syn.train, "Training items (800 images or 16 slides)");
  c_syn->add_option("--val", syn.val, "Validation items (200 images or 6 slides)");
  c_syn->add_option("--test", syn.test, "Test items (400 images or 8 slides)");
  c_syn->add_option("--size", syn.size, "Image or slide edge in px");
  c_syn->add_option("--seed", syn.seed)->capture_default_str();
  c_syn->add_option("--out", syn.out)->required();

  TileArgs til;
  auto* c_til = app.add_subcommand("tile", "Tissue detection and grid patch extraction");
  c_til->add_option("--slides", til.slides, "Slide dataset directory");
  c_til->add_option("--slide", til.slide, "Single RGB PPM slide");
  c_til->add_option("--patch", til.opt.patch_px)->capture_default_str();
  c_til->add_option("--min-tissue", til.opt.min_tissue)->capture_default_str();
  c_til->add_option("--sat-threshold", til.opt.sat_threshold)->capture_default_str();
  c_til->add_option("--out", til.out)->required();

  ExtractArgs ext;
  auto* c_ext = app.add_subcommand("extract-features", "Frozen class-token features for a patch directory");
  c_ext->add_option("--base", ext.base)->required();
  c_ext->add_option("--patches", ext.patches)->required();
  c_ext->add_option("--out", ext.out)->required();

  AdaptArgs ad;
  auto* c_ad = app.add_subcommand("adapt", "Train heads, with or without low-rank adapters");
  c_ad->add_option("--base", ad.base)->required();
  c_ad->add_option("--task", ad.task, "roi, fewshot, seg or mil");
  c_ad->add_option("--pathfit", ad.pathfit, "on or off")->capture_default_str();
  c_ad->add_option("--data", ad.data)->required();
  c_ad->add_option("--out", ad.out)->required();
  c_ad->add_option("--config", ad.config, "JSON train config; flags override it");
  c_ad->add_option("--sample-k", ad.sample_k, "Patches per bag through the adapted path");
  c_ad->add_option("--epochs", ad.epochs);
  c_ad->add_option("--shots", ad.shots);
  c_ad->add_option("--rank", ad.rank);
  c_ad->add_option("--batch", ad.batch);
  c_ad->add_option("--lr", ad.lr);
  c_ad->add_option("--head", ad.head, "linear or prompt");
  c_ad->add_option("--seeds", ad.seeds, "Comma-separated seed list");
  c_ad->add_flag("-v,--verbose", ad.verbose);

  CompareArgs cmp;
  auto* c_cmp = app.add_subcommand("compare", "Per-metric deltas and error reduction between two runs");
  c_cmp->add_option("run_a", cmp.run_a)->required();
  c_cmp->add_option("run_b", cmp.run_b)->required();
  c_cmp->add_option("--out", cmp.out);

  HeatmapArgs hm;
  auto* c_hm = app.add_subcommand("heatmap", "Attention heatmap as an 8-bit PGM");
  c_hm->add_option("--run", hm.run)->required();
  c_hm->add_option("--slide", hm.slide, "Slide id (mil) or image id such as test/00003")->required();
  c_hm->add_option("--mode", hm.mode, "cls-attn or mil-attn")->capture_default_str();
  c_hm->add_option("--seed-index", hm.seed_index)->capture_default_str();
  c_hm->add_option("--out", hm.out)->required();

  CountArgs cnt;
  auto* c_cnt = app.add_subcommand("count-params", "Adapter and backbone parameter counts");
  c_cnt->add_option("--config", cnt.config, "JSON backbone config");
  c_cnt->add_option("--image", cnt.vit.image_size)->capture_default_str();
  c_cnt->add_option("--patch", cnt.vit.patch_size)->capture_default_str();
  c_cnt->add_option("--dim", cnt.vit.dim)->capture_default_str();
  c_cnt->add_option("--depth", cnt.vit.depth)->capture_default_str();
  c_cnt->add_option("--heads", cnt.vit.heads)->capture_default_str();
  c_cnt->add_option("--mlp-ratio", cnt.vit.mlp_ratio)->capture_default_str();
  c_cnt->add_option("--rank", cnt.rank)->capture_default_str();
  c_cnt->add_option("--alpha", cnt.alpha)->capture_default_str();
  c_cnt->add_option("--targets", cnt.targets)->capture_default_str();
  c_cnt->add_option("--classes", cnt.classes, "Linear head classes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_pre) cmd_pretrain(pre);
    if (*c_syn) cmd_synth(syn);
    if (*c_til) cmd_tile(til);
    if (*c_ext) cmd_extract(ext);
    if (*c_ad) cmd_adapt(ad);
    if (*c_cmp) cmd_compare(cmp);
    if (*c_hm) cmd_heatmap(hm);
    if (*c_cnt) cmd_count(cnt);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
