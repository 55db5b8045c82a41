#include "dedetr/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dedetr/checkpoint.hpp"
#include "dedetr/rng.hpp"

namespace dedetr {

namespace {

// Signatures are seeded independently of the scene stream so every dataset
// shares the same class basis.
constexpr uint64_t kSignatureStream = 0x51474e53ULL;  // "SIGN"

// How many cells per side the assigned level should give an object.
constexpr double kCellsPerSide = 2.0;

// Same-level boxes may cover at most this fraction of each other, so the
// footprint-mean oracle keeps a margin over any intruding class.
constexpr double kMaxOverlap = 0.5;
constexpr int kPlacementTries = 40;

std::vector<std::vector<double>> signature_basis(int64_t channels, int64_t num_classes) {
  std::vector<std::vector<double>> basis(num_classes);
  for (int64_t c = 0; c < num_classes; ++c) {
    Rng rng(mix_seed(kSignatureStream, static_cast<uint64_t>(c)));
    std::vector<double>& v = basis[c];
    v.resize(channels);
    for (double& x : v) x = rng.normal();
    if (num_classes <= channels) {
      for (int64_t j = 0; j < c; ++j) {  // Gram-Schmidt against earlier classes
        double dot = 0.0;
        for (int64_t k = 0; k < channels; ++k) dot += v[k] * basis[j][k];
        for (int64_t k = 0; k < channels; ++k) v[k] -= dot * basis[j][k];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 1e-9)) throw NumericError("degenerate class signature");
    for (double& x : v) x /= norm;
  }
  return basis;
}

double overlap_fraction(const Box& a, const Box& b) {
  const double ax1 = a.v[0] - a.v[2] * 0.5, ax2 = a.v[0] + a.v[2] * 0.5;
  const double ay1 = a.v[1] - a.v[3] * 0.5, ay2 = a.v[1] + a.v[3] * 0.5;
  const double bx1 = b.v[0] - b.v[2] * 0.5, bx2 = b.v[0] + b.v[2] * 0.5;
  const double by1 = b.v[1] - b.v[3] * 0.5, by2 = b.v[1] + b.v[3] * 0.5;
  const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = iw * ih;
  const double min_area = std::min(a.v[2] * a.v[3], b.v[2] * b.v[3]);
  return inter / min_area;
}

}  // namespace

void SceneSpec::validate() const {
  if (image_size < 1) throw ConfigError("image_size must be >= 1");
  if (strides.empty()) throw ConfigError("at least one pyramid stride is required");
  for (size_t i = 0; i < strides.size(); ++i) {
    if (strides[i] < 1 || image_size % strides[i] != 0)
      throw ConfigError("every stride must divide image_size");
    if (i > 0 && strides[i] <= strides[i - 1])
      throw ConfigError("strides must be strictly ascending");
  }
  if (channels < 1) throw ConfigError("channels must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (max_objects < 1) throw ConfigError("max_objects must be >= 1");
  if (!(scale_min > 0.0) || !(scale_max <= 1.0) || !(scale_min <= scale_max))
    throw ConfigError("need 0 < scale_min <= scale_max <= 1");
  if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  // the finest level must give the smallest object at least one cell center
  if (scale_min * image_size < static_cast<double>(strides.front()))
    throw ConfigError("scale_min too small for the finest stride");
}

std::vector<double> class_signature(int64_t class_id, int64_t channels, int64_t num_classes) {
  if (class_id < 0 || class_id >= num_classes) throw ContractError("class id out of range");
  return signature_basis(channels, num_classes)[class_id];
}

int level_for_box(const Box& box, const SceneSpec& spec) {
  const double size_px = std::sqrt(box.v[2] * box.v[3]) * spec.image_size;
  const double ideal = std::log2(size_px / kCellsPerSide);
  int best = 0;
  double best_dist = std::abs(std::log2(static_cast<double>(spec.strides[0])) - ideal);
  for (size_t l = 1; l < spec.strides.size(); ++l) {
    const double dist = std::abs(std::log2(static_cast<double>(spec.strides[l])) - ideal);
    if (dist < best_dist) {  // ties keep the finer level
      best_dist = dist;
      best = static_cast<int>(l);
    }
  }
  return best;
}

Scene gen_scene(const SceneSpec& spec, int64_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(index)));
  const auto basis = signature_basis(spec.channels, spec.num_classes);

  const int num_levels = static_cast<int>(spec.strides.size());
  std::vector<int64_t> hs(num_levels), ws(num_levels);
  std::vector<std::vector<double>> grids(num_levels);
  for (int l = 0; l < num_levels; ++l) {
    hs[l] = spec.image_size / spec.strides[l];
    ws[l] = hs[l];
    grids[l].assign(static_cast<size_t>(hs[l] * ws[l] * spec.channels), 0.0);
  }

  struct Placed {
    int64_t class_id;
    Box box;
    int level;
  };
  std::vector<Placed> placed;
  const int64_t target = 1 + static_cast<int64_t>(rng.uniform_index(spec.max_objects));
  for (int64_t o = 0; o < target; ++o) {
    const int64_t cls = static_cast<int64_t>(rng.uniform_index(spec.num_classes));
    // The size (geometric-mean side) is log-uniform so objects spread evenly
    // across octaves and every pyramid level receives a comparable share of
    // them; uniform sampling would concentrate nearly everything on the
    // coarsest level. The aspect ratio is log-uniform up to 2:1, shrunk
    // toward square near the size limits so both sides stay in range.
    const double log_ratio = std::log(spec.scale_max / spec.scale_min);
    const double size = spec.scale_min * std::exp(log_ratio * rng.uniform());
    const double ar_cap = std::min({2.0, std::pow(spec.scale_max / size, 2),
                                    std::pow(size / spec.scale_min, 2)});
    const double aspect = std::exp(std::log(ar_cap) * (2.0 * rng.uniform() - 1.0));
    const double w = size * std::sqrt(aspect);
    const double h = size / std::sqrt(aspect);
    Box box = Box::cxcywh(0, 0, w, h);
    const int level = level_for_box(box, spec);
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementTries && !ok; ++attempt) {
      box.v[0] = w * 0.5 + (1.0 - w) * rng.uniform();
      box.v[1] = h * 0.5 + (1.0 - h) * rng.uniform();
      ok = true;
      for (const Placed& p : placed) {
        if (p.level != level) continue;
        if (overlap_fraction(box, p.box) > kMaxOverlap) {
          ok = false;
          break;
        }
      }
    }
    if (ok) placed.push_back(Placed{cls, box, level});
    // objects that cannot be placed without crowding their level are dropped
  }

  for (const Placed& p : placed) {
    const int l = p.level;
    const double x1 = (p.box.v[0] - p.box.v[2] * 0.5) * static_cast<double>(ws[l]);
    const double x2 = (p.box.v[0] + p.box.v[2] * 0.5) * static_cast<double>(ws[l]);
    const double y1 = (p.box.v[1] - p.box.v[3] * 0.5) * static_cast<double>(hs[l]);
    const double y2 = (p.box.v[1] + p.box.v[3] * 0.5) * static_cast<double>(hs[l]);
    const std::vector<double>& sig = basis[p.class_id];
    // Each overlapped cell receives the signature scaled by the fraction of
    // the cell's area the box covers. The soft edges matter: a boundary
    // cell's amplitude encodes where inside it the box edge falls, so boxes
    // remain localizable below the stride. A hard center-in-box mask would
    // quantize away that information and cap the achievable overlap accuracy
    // for objects only a cell or two across.
    const int64_t i0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(y1)), 0, hs[l]);
    const int64_t i1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(y2)), 0, hs[l]);
    const int64_t j0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(x1)), 0, ws[l]);
    const int64_t j1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(x2)), 0, ws[l]);
    for (int64_t ci = i0; ci < i1; ++ci) {
      const double cover_y =
          std::min(y2, static_cast<double>(ci) + 1.0) - std::max(y1, static_cast<double>(ci));
      if (cover_y <= 0.0) continue;
      for (int64_t cj = j0; cj < j1; ++cj) {
        const double cover_x =
            std::min(x2, static_cast<double>(cj) + 1.0) - std::max(x1, static_cast<double>(cj));
        if (cover_x <= 0.0) continue;
        const double weight = cover_x * cover_y;
        double* cell = grids[l].data() + (ci * ws[l] + cj) * spec.channels;
        for (int64_t ch = 0; ch < spec.channels; ++ch) cell[ch] += weight * sig[ch];
      }
    }
  }

  if (spec.noise_std > 0.0)
    for (int l = 0; l < num_levels; ++l)
      for (double& x : grids[l]) x += spec.noise_std * rng.normal();

  Scene scene;
  for (int l = 0; l < num_levels; ++l) {
    FeatureMap fm;
    fm.height = hs[l];
    fm.width = ws[l];
    fm.channels = spec.channels;
    fm.stride = spec.strides[l];
    fm.values = Tensor::from_data({hs[l], ws[l], spec.channels}, std::move(grids[l]));
    scene.pyramid.levels.push_back(std::move(fm));
  }
  for (const Placed& p : placed)
    scene.labels.foreground.push_back(LabelEntry{p.class_id, p.box});
  return scene;
}

std::vector<Scene> gen_dataset(const SceneSpec& spec, int64_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  for (int64_t i = 0; i < count; ++i) out.push_back(gen_scene(spec, i));
  return out;
}

std::vector<Scene> subsample(const std::vector<Scene>& scenes, double ratio, uint64_t seed) {
  if (!(ratio > 0.0) || !(ratio <= 1.0))
    throw ConfigError("subsample ratio must lie in (0, 1]");
  const int64_t n = static_cast<int64_t>(scenes.size());
  const int64_t k = static_cast<int64_t>(std::ceil(static_cast<double>(n) * ratio));
  std::vector<int64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<Scene> out;
  out.reserve(k);
  for (int64_t i : idx) out.push_back(scenes[i]);
  return out;
}

void save_scenes(const std::string& dir, const std::vector<Scene>& scenes) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["count"] = scenes.size();
  manifest["scenes"] = nlohmann::json::array();
  std::ofstream blob(fs::path(dir) / "scenes.bin", std::ios::binary);
  if (!blob) throw IoError("cannot open scenes.bin for writing in " + dir);
  for (size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    nlohmann::json js;
    js["labels"] = nlohmann::json::array();
    for (const LabelEntry& le : s.labels.foreground)
      js["labels"].push_back({{"class", le.class_id},
                              {"box", {le.box.v[0], le.box.v[1], le.box.v[2], le.box.v[3]}}});
    js["levels"] = nlohmann::json::array();
    for (size_t l = 0; l < s.pyramid.levels.size(); ++l) {
      const FeatureMap& fm = s.pyramid.levels[l];
      js["levels"].push_back({{"height", fm.height},
                              {"width", fm.width},
                              {"channels", fm.channels},
                              {"stride", fm.stride}});
      TensorRecord rec;
      rec.name = "scene" + std::to_string(i) + ".level" + std::to_string(l);
      rec.dims = fm.values.dims();
      rec.data.reserve(fm.values.values().size());
      for (double v : fm.values.values()) rec.data.push_back(static_cast<float>(v));
      write_tensor_record(blob, rec);
    }
    manifest["scenes"].push_back(std::move(js));
  }
  if (!blob) throw IoError("writing scenes.bin failed");
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("cannot open manifest.json for writing in " + dir);
  mf << manifest.dump(2) << "\n";
}

std::vector<Scene> load_scenes(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("cannot open manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
  if (manifest.is_discarded()) throw IoError("manifest.json is not valid JSON");
  std::ifstream blob(fs::path(dir) / "scenes.bin", std::ios::binary);
  if (!blob) throw IoError("cannot open scenes.bin in " + dir);

  std::vector<Scene> out;
  const auto& list = manifest.at("scenes");
  for (size_t i = 0; i < list.size(); ++i) {
    const auto& js = list[i];
    Scene s;
    for (const auto& le : js.at("labels")) {
      const auto& b = le.at("box");
      s.labels.foreground.push_back(
          LabelEntry{le.at("class").get<int64_t>(),
                     Box::cxcywh(b.at(0), b.at(1), b.at(2), b.at(3))});
    }
    for (size_t l = 0; l < js.at("levels").size(); ++l) {
      const auto& jl = js.at("levels")[l];
      TensorRecord rec = read_tensor_record(blob);
      const std::string want = "scene" + std::to_string(i) + ".level" + std::to_string(l);
      if (rec.name != want) throw IoError("scenes.bin record order disagrees with manifest");
      FeatureMap fm;
      fm.height = jl.at("height").get<int64_t>();
      fm.width = jl.at("width").get<int64_t>();
      fm.channels = jl.at("channels").get<int64_t>();
      fm.stride = jl.at("stride").get<int>();
      if (rec.dims != Shape{fm.height, fm.width, fm.channels})
        throw IoError("scene tensor shape disagrees with manifest");
      std::vector<double> vals(rec.data.begin(), rec.data.end());
      fm.values = Tensor::from_data(rec.dims, std::move(vals));
      s.pyramid.levels.push_back(std::move(fm));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dedetr
