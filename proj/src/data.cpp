#include "xnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

namespace xnet {

namespace fs = std::filesystem;

// --- Graymap files -----------------------------------------------------------

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string pgm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

Index parse_header_number(const std::string& tok, const fs::path& path) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); })) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  return std::stoll(tok);
}

}  // namespace

GrayImage read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  if (pgm_token(is) != "P5") throw FormatError(path.string() + ": not a binary graymap (P5)");
  GrayImage img;
  img.width = parse_header_number(pgm_token(is), path);
  img.height = parse_header_number(pgm_token(is), path);
  const Index maxval = parse_header_number(pgm_token(is), path);
  if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 65535) {
    throw FormatError(path.string() + ": invalid PGM dimensions or maxval");
  }
  img.maxval = static_cast<std::uint16_t>(maxval);
  const auto n = static_cast<std::size_t>(img.width * img.height);
  const std::size_t bytes_per = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(n * bytes_per);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError(path.string() + ": truncated PGM data");
  }
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = bytes_per == 1 ? raw[i] : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
    if (img.pixels[i] > img.maxval) throw FormatError(path.string() + ": sample exceeds maxval");
  }
  return img;
}

void write_pgm(const fs::path& path, const GrayImage& img) {
  if (static_cast<Index>(img.pixels.size()) != img.height * img.width) throw ShapeError("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  std::vector<unsigned char> raw;
  if (img.maxval < 256) {
    raw.assign(img.pixels.begin(), img.pixels.end());
  } else {
    raw.reserve(img.pixels.size() * 2);
    for (auto v : img.pixels) {
      raw.push_back(static_cast<unsigned char>(v >> 8));
      raw.push_back(static_cast<unsigned char>(v & 0xff));
    }
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

GrayImage to_gray16(std::span<const float> values, Index height, Index width) {
  GrayImage img{height, width, 65535, {}};
  img.pixels.reserve(values.size());
  for (float v : values) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    img.pixels.push_back(static_cast<std::uint16_t>(std::lround(c * 65535.0)));
  }
  return img;
}

GrayImage to_mask_image(std::span<const std::uint8_t> mask, Index height, Index width) {
  GrayImage img{height, width, 255, {}};
  img.pixels.reserve(mask.size());
  for (auto m : mask) img.pixels.push_back(m ? 255 : 0);
  return img;
}

std::vector<std::uint8_t> mask_from_image(const GrayImage& image) {
  std::vector<std::uint8_t> mask(image.pixels.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto v = image.pixels[i];
    if (v != 0 && v != image.maxval) throw FormatError("mask image is not binary");
    mask[i] = v ? 1 : 0;
  }
  return mask;
}

// --- Manifest ----------------------------------------------------------------

std::size_t DatasetManifest::slice_count() const {
  std::size_t n = 0;
  for (const auto& v : volumes) n += v.images.size();
  return n;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json vols = nlohmann::json::array();
  for (const auto& v : volumes) {
    vols.push_back({{"id", v.id}, {"images", v.images}, {"masks", v.masks}, {"height", v.height}, {"width", v.width}});
  }
  return {{"volumes", std::move(vols)}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, fs::path root) {
  DatasetManifest m;
  m.root = std::move(root);
  try {
    std::set<std::string> ids;
    for (const auto& v : j.at("volumes")) {
      VolumeEntry e;
      e.id = v.at("id").get<std::string>();
      e.images = v.at("images").get<std::vector<std::string>>();
      e.masks = v.at("masks").get<std::vector<std::string>>();
      e.height = v.at("height").get<Index>();
      e.width = v.at("width").get<Index>();
      if (e.images.size() != e.masks.size()) throw FormatError("volume '" + e.id + "': image/mask counts differ");
      if (e.images.empty()) throw FormatError("volume '" + e.id + "' has no slices");
      if (e.height <= 0 || e.width <= 0) throw FormatError("volume '" + e.id + "': bad slice dimensions");
      if (!ids.insert(e.id).second) throw FormatError("duplicate volume id '" + e.id + "'");
      m.volumes.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return from_json(j, dir);
}

void DatasetManifest::save() const {
  const auto path = root / kManifestName;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << to_json().dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

// --- Synthetic lesions -------------------------------------------------------

bool Ellipse::contains(double row, double col) const {
  const double dr = row - center_row;
  const double dc = col - center_col;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double u = dr * c + dc * s;
  const double v = -dr * s + dc * c;
  return (u * u) / (radius_row * radius_row) + (v * v) / (radius_col * radius_col) <= 1.0;
}

std::vector<std::uint8_t> rasterize_ellipses(std::span<const Ellipse> lesions, Index height, Index width) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(height * width), 0);
  for (const auto& e : lesions) {
    const double reach = std::max(e.radius_row, e.radius_col);
    const Index r_lo = std::max<Index>(0, static_cast<Index>(std::floor(e.center_row - reach)));
    const Index r_hi = std::min<Index>(height - 1, static_cast<Index>(std::ceil(e.center_row + reach)));
    const Index c_lo = std::max<Index>(0, static_cast<Index>(std::floor(e.center_col - reach)));
    const Index c_hi = std::min<Index>(width - 1, static_cast<Index>(std::ceil(e.center_col + reach)));
    for (Index r = r_lo; r <= r_hi; ++r) {
      for (Index c = c_lo; c <= c_hi; ++c) {
        if (e.contains(static_cast<double>(r), static_cast<double>(c))) mask[static_cast<std::size_t>(r * width + c)] = 1;
      }
    }
  }
  return mask;
}

std::vector<float> gaussian_blur(std::span<const float> image, Index height, Index width, double sigma) {
  if (sigma <= 0) return {image.begin(), image.end()};
  const auto radius = static_cast<Index>(std::ceil(3 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (Index i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& k : kernel) k /= total;

  auto at = [](Index i, Index n) { return std::clamp<Index>(i, 0, n - 1); };
  std::vector<float> tmp(image.size());
  std::vector<float> out(image.size());
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      double acc = 0;
      for (Index k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * image[static_cast<std::size_t>(r * width + at(c + k, width))];
      }
      tmp[static_cast<std::size_t>(r * width + c)] = static_cast<float>(acc);
    }
  }
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      double acc = 0;
      for (Index k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(at(r + k, height) * width + c)];
      }
      out[static_cast<std::size_t>(r * width + c)] = static_cast<float>(acc);
    }
  }
  return out;
}

namespace {

// Bilinear interpolation of a coarse grid of random values over the image.
std::vector<float> value_noise(Index height, Index width, Index grid, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> nodes(static_cast<std::size_t>((grid + 1) * (grid + 1)));
  for (auto& n : nodes) n = dist(rng);
  std::vector<float> out(static_cast<std::size_t>(height * width));
  for (Index r = 0; r < height; ++r) {
    const double gy = static_cast<double>(r) / static_cast<double>(height) * static_cast<double>(grid);
    const auto y0 = static_cast<Index>(gy);
    const double fy = gy - static_cast<double>(y0);
    for (Index c = 0; c < width; ++c) {
      const double gx = static_cast<double>(c) / static_cast<double>(width) * static_cast<double>(grid);
      const auto x0 = static_cast<Index>(gx);
      const double fx = gx - static_cast<double>(x0);
      auto node = [&](Index y, Index x) { return nodes[static_cast<std::size_t>(y * (grid + 1) + x)]; };
      const double top = node(y0, x0) * (1 - fx) + node(y0, x0 + 1) * fx;
      const double bottom = node(y0 + 1, x0) * (1 - fx) + node(y0 + 1, x0 + 1) * fx;
      out[static_cast<std::size_t>(r * width + c)] = static_cast<float>(top * (1 - fy) + bottom * fy);
    }
  }
  return out;
}

}  // namespace

std::vector<SyntheticSlice> synthesize_volume(const SyntheticOptions& o, Index volume_index) {
  std::seed_seq seq{static_cast<std::uint64_t>(o.seed), static_cast<std::uint64_t>(volume_index)};
  std::mt19937_64 rng(seq);
  const Index h = o.height, w = o.width;
  const auto base = value_noise(h, w, 4, 0.45, 0.75, rng);

  std::uniform_int_distribution<int> count_dist(0, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, o.noise_sigma);
  const double side = static_cast<double>(std::min(h, w));

  std::vector<SyntheticSlice> slices;
  for (Index s = 0; s < o.slices_per_volume; ++s) {
    SyntheticSlice slice;
    const int count = o.lesions_per_slice ? *o.lesions_per_slice : count_dist(rng);
    for (int l = 0; l < count; ++l) {
      Ellipse e;
      e.center_row = (0.15 + 0.7 * unit(rng)) * static_cast<double>(h);
      e.center_col = (0.15 + 0.7 * unit(rng)) * static_cast<double>(w);
      e.radius_row = (0.03 + 0.22 * unit(rng)) * side;
      e.radius_col = (0.03 + 0.22 * unit(rng)) * side;
      e.angle = unit(rng) * std::numbers::pi;
      slice.lesions.push_back(e);
    }
    slice.mask = rasterize_ellipses(slice.lesions, h, w);
    std::vector<float> lesion(slice.mask.begin(), slice.mask.end());
    const auto fuzzy = gaussian_blur(lesion, h, w, o.blur_sigma);
    const auto drift = value_noise(h, w, 3, -0.05, 0.05, rng);
    const double depth = 0.3 + 0.1 * unit(rng);
    slice.image.resize(static_cast<std::size_t>(h * w));
    for (std::size_t i = 0; i < slice.image.size(); ++i) {
      slice.image[i] = static_cast<float>(base[i] + drift[i] - depth * fuzzy[i] + noise(rng));
    }
    slices.push_back(std::move(slice));
  }
  return slices;
}

SyntheticSummary generate_synthetic(const SyntheticOptions& o, const fs::path& out_dir) {
  if (o.height <= 0 || o.width <= 0 || o.height % 16 != 0 || o.width % 16 != 0) {
    throw ConfigError("synthetic slice dimensions must be positive multiples of 16");
  }
  if (o.volumes < 1 || o.slices_per_volume < 1) throw ConfigError("need at least one volume and one slice");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  SyntheticSummary summary;
  summary.manifest.root = out_dir;
  std::uint64_t lesion_pixels = 0, pixels = 0;
  for (Index v = 0; v < o.volumes; ++v) {
    char id[32];
    std::snprintf(id, sizeof id, "vol_%03lld", static_cast<long long>(v));
    VolumeEntry entry{id, {}, {}, o.height, o.width};
    fs::create_directories(out_dir / id, ec);
    if (ec) throw IoError("cannot create " + (out_dir / id).string());

    auto slices = synthesize_volume(o, v);
    std::vector<float> all;
    for (const auto& s : slices) all.insert(all.end(), s.image.begin(), s.image.end());
    const auto normalized = normalize_intensity(all);
    const auto per_slice = static_cast<std::size_t>(o.height * o.width);
    for (std::size_t s = 0; s < slices.size(); ++s) {
      char img_name[32], mask_name[32];
      std::snprintf(img_name, sizeof img_name, "img_%03zu.pgm", s);
      std::snprintf(mask_name, sizeof mask_name, "mask_%03zu.pgm", s);
      const std::span<const float> img(normalized.data() + s * per_slice, per_slice);
      write_pgm(out_dir / id / img_name, to_gray16(img, o.height, o.width));
      write_pgm(out_dir / id / mask_name, to_mask_image(slices[s].mask, o.height, o.width));
      entry.images.push_back(std::string(id) + "/" + img_name);
      entry.masks.push_back(std::string(id) + "/" + mask_name);
      for (auto m : slices[s].mask) lesion_pixels += m;
      pixels += per_slice;
      ++summary.slices;
    }
    summary.manifest.volumes.push_back(std::move(entry));
  }
  summary.manifest.save();
  summary.lesion_fraction = static_cast<double>(lesion_pixels) / static_cast<double>(pixels);
  return summary;
}

// --- Preprocessing -----------------------------------------------------------

std::pair<Index, Index> crop_offsets(Index height, Index width, Index target_height, Index target_width) {
  if (target_height <= 0 || target_width <= 0) throw ShapeError("crop target must be positive");
  if (target_height > height || target_width > width) {
    throw ShapeError("crop target " + std::to_string(target_height) + "x" + std::to_string(target_width) +
                     " exceeds source " + std::to_string(height) + "x" + std::to_string(width));
  }
  return {(height - target_height) / 2, (width - target_width) / 2};
}

template <Real T>
Tensor<T> center_crop(const Tensor<T>& image, Index target_height, Index target_width) {
  if (image.ndim() != 2) throw ShapeError("center_crop: expected [H×W], got " + to_string(image.shape()));
  auto out = center_crop<T>(image.data(), image.dim(0), image.dim(1), target_height, target_width);
  return Tensor<T>({target_height, target_width}, std::move(out));
}

Index floor_to_multiple_of_16(Index n) { return n / 16 * 16; }

std::vector<float> normalize_intensity(std::span<const float> values) {
  check_finite(values, "normalize_intensity input");
  if (values.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<float> out(values.size(), 0.0f);
  if (hi > lo) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      out[i] = static_cast<float>((static_cast<double>(values[i]) - lo) / (hi - lo));
    }
  }
  return out;
}

// --- Folds -------------------------------------------------------------------

std::vector<std::string> FoldAssignment::fold(int index) const {
  if (index < 0 || index >= k) throw ConfigError("fold index " + std::to_string(index) + " outside [0," + std::to_string(k) + ")");
  std::vector<std::string> ids;
  for (const auto& id : order) {
    if (fold_of.at(id) == index) ids.push_back(id);
  }
  return ids;
}

std::vector<std::string> FoldAssignment::complement(int index) const {
  if (index < 0 || index >= k) throw ConfigError("fold index " + std::to_string(index) + " outside [0," + std::to_string(k) + ")");
  std::vector<std::string> ids;
  for (const auto& id : order) {
    if (fold_of.at(id) != index) ids.push_back(id);
  }
  return ids;
}

FoldAssignment split_folds(const std::vector<std::string>& volume_ids, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  if (static_cast<int>(volume_ids.size()) < k) {
    throw ConfigError("cannot split " + std::to_string(volume_ids.size()) + " volumes into " + std::to_string(k) +
                      " folds");
  }
  FoldAssignment f;
  f.k = k;
  f.seed = seed;
  f.order = volume_ids;
  std::mt19937_64 rng(seed);
  seeded_shuffle(f.order.begin(), f.order.end(), rng);
  for (std::size_t i = 0; i < f.order.size(); ++i) {
    if (!f.fold_of.emplace(f.order[i], static_cast<int>(i % static_cast<std::size_t>(k))).second) {
      throw ConfigError("duplicate volume id '" + f.order[i] + "'");
    }
  }
  return f;
}

FoldAssignment split_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& v : manifest.volumes) ids.push_back(v.id);
  return split_folds(ids, k, seed);
}

// --- In-memory dataset and batching -----------------------------------------

const Volume& VolumeDataset::volume(const std::string& id) const {
  for (const auto& v : volumes) {
    if (v.id == id) return v;
  }
  throw ConfigError("unknown volume '" + id + "'");
}

std::vector<const Volume*> VolumeDataset::select(const std::vector<std::string>& ids) const {
  std::vector<const Volume*> out;
  for (const auto& id : ids) out.push_back(&volume(id));
  return out;
}

VolumeDataset load_dataset(const DatasetManifest& manifest, std::optional<std::pair<Index, Index>> crop) {
  if (manifest.volumes.empty()) throw FormatError("manifest lists no volumes");
  VolumeDataset ds;
  for (const auto& entry : manifest.volumes) {
    const Index th = crop ? crop->first : floor_to_multiple_of_16(entry.height);
    const Index tw = crop ? crop->second : floor_to_multiple_of_16(entry.width);
    if (th <= 0 || tw <= 0) throw FormatError("volume '" + entry.id + "' is smaller than 16 pixels");
    if (ds.volumes.empty()) {
      ds.height = th;
      ds.width = tw;
    } else if (ds.height != th || ds.width != tw) {
      throw FormatError("volumes crop to different sizes");
    }

    Volume vol{entry.id, {}};
    std::vector<std::vector<float>> raw;
    std::vector<float> all;
    for (std::size_t s = 0; s < entry.images.size(); ++s) {
      const auto img = read_pgm(manifest.root / entry.images[s]);
      const auto msk = read_pgm(manifest.root / entry.masks[s]);
      if (img.height != entry.height || img.width != entry.width || msk.height != entry.height ||
          msk.width != entry.width) {
        throw FormatError("slice " + std::to_string(s) + " of '" + entry.id + "' does not match the manifest size");
      }
      std::vector<float> values(img.pixels.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = static_cast<float>(static_cast<double>(img.pixels[i]) / img.maxval);
      }
      all.insert(all.end(), values.begin(), values.end());
      SliceData slice;
      slice.index = static_cast<Index>(s);
      slice.mask = center_crop<std::uint8_t>(mask_from_image(msk), entry.height, entry.width, th, tw);
      vol.slices.push_back(std::move(slice));
    }
    const auto normalized = normalize_intensity(all);
    const auto per_slice = static_cast<std::size_t>(entry.height * entry.width);
    for (std::size_t s = 0; s < vol.slices.size(); ++s) {
      const std::span<const float> img(normalized.data() + s * per_slice, per_slice);
      vol.slices[s].image = center_crop<float>(img, entry.height, entry.width, th, tw);
    }
    ds.volumes.push_back(std::move(vol));
  }
  return ds;
}

template <Real T>
BatchStream<T>::BatchStream(std::vector<const Volume*> volumes, Index height, Index width, Index batch_size,
                            std::uint64_t seed, bool shuffle)
    : height_(height), width_(width), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  for (const auto* v : volumes) {
    for (const auto& s : v->slices) slices_.push_back({v, &s});
  }
  if (slices_.empty()) throw ConfigError("no slices to batch");
}

template <Real T>
std::size_t BatchStream<T>::batches_per_epoch() const {
  const auto b = static_cast<std::size_t>(batch_size_);
  return (slices_.size() + b - 1) / b;
}

template <Real T>
std::vector<std::size_t> BatchStream<T>::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(slices_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle_) {
    std::seed_seq seq{seed_, static_cast<std::uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    seeded_shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

template <Real T>
Batch<T> BatchStream<T>::make_batch(std::span<const std::size_t> indices) const {
  const auto pixels = static_cast<std::size_t>(height_ * width_);
  std::vector<T> images, masks;
  images.reserve(indices.size() * pixels);
  masks.reserve(indices.size() * pixels);
  Batch<T> batch;
  for (auto i : indices) {
    const auto& ref = slices_.at(i);
    images.insert(images.end(), ref.slice->image.begin(), ref.slice->image.end());
    for (auto m : ref.slice->mask) masks.push_back(static_cast<T>(m));
    batch.origin.emplace_back(ref.volume->id, ref.slice->index);
  }
  const auto b = static_cast<Index>(indices.size());
  batch.images = Tensor<T>({b, 1, height_, width_}, std::move(images));
  batch.masks = Tensor<T>({b, 1, height_, width_}, std::move(masks));
  return batch;
}

template <Real T>
std::vector<Batch<T>> BatchStream<T>::epoch(std::size_t epoch) const {
  const auto order = epoch_order(epoch);
  std::vector<Batch<T>> batches;
  const auto b = static_cast<std::size_t>(batch_size_);
  for (std::size_t start = 0; start < order.size(); start += b) {
    const auto len = std::min(b, order.size() - start);
    batches.push_back(make_batch(std::span<const std::size_t>(order.data() + start, len)));
  }
  return batches;
}

template Tensor<float> center_crop(const Tensor<float>&, Index, Index);
template Tensor<double> center_crop(const Tensor<double>&, Index, Index);
template class BatchStream<float>;
template class BatchStream<double>;

}  // namespace xnet
