#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "xnet/data.hpp"

using namespace xnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("xnet_test_data_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<const Volume*> all_volumes(const VolumeDataset& ds) {
  std::vector<const Volume*> out;
  for (const auto& v : ds.volumes) out.push_back(&v);
  return out;
}

SyntheticOptions tiny(Index volumes = 3, Index slices = 4) {
  SyntheticOptions o;
  o.volumes = volumes;
  o.slices_per_volume = slices;
  o.height = 32;
  o.width = 48;
  o.seed = 5;
  return o;
}

}  // namespace

TEST_CASE("graymap files") {
  TempDir tmp("pgm");
  SUBCASE("16-bit roundtrip is big-endian") {
    GrayImage img{2, 3, 65535, {0, 1, 256, 65535, 4660, 7}};
    write_pgm(tmp.path / "a.pgm", img);
    const auto back = read_pgm(tmp.path / "a.pgm");
    CHECK(back.height == 2);
    CHECK(back.width == 3);
    CHECK(back.maxval == 65535);
    CHECK(back.pixels == img.pixels);
    const auto raw = slurp(tmp.path / "a.pgm");
    CHECK(raw.starts_with("P5"));
    const auto payload = raw.substr(raw.size() - 12);
    CHECK(static_cast<unsigned char>(payload[6]) == 0xFF);
    CHECK(static_cast<unsigned char>(payload[8]) == 0x12);  // 4660 = 0x1234
    CHECK(static_cast<unsigned char>(payload[9]) == 0x34);
  }
  SUBCASE("8-bit mask roundtrip") {
    const std::vector<std::uint8_t> mask{0, 1, 1, 0, 0, 1};
    write_pgm(tmp.path / "m.pgm", to_mask_image(mask, 3, 2));
    const auto img = read_pgm(tmp.path / "m.pgm");
    CHECK(img.maxval == 255);
    CHECK(mask_from_image(img) == mask);
    const auto raw = slurp(tmp.path / "m.pgm");
    CHECK(static_cast<unsigned char>(raw[raw.size() - 5]) == 255);
  }
  SUBCASE("float conversion") {
    const std::vector<float> v{0.0f, 0.5f, 1.0f};
    const auto g = to_gray16(v, 1, 3);
    CHECK(g.pixels[0] == 0);
    CHECK(g.pixels[2] == 65535);
    CHECK(std::abs(static_cast<int>(g.pixels[1]) - 32768) <= 1);
  }
  SUBCASE("non-binary mask") {
    GrayImage img{1, 3, 255, {0, 128, 255}};
    CHECK_THROWS_AS(mask_from_image(img), FormatError);
  }
  SUBCASE("malformed files") {
    std::ofstream(tmp.path / "bad.pgm", std::ios::binary) << "P2\n2 2\n255\n0 0 0 0";
    CHECK_THROWS_AS(read_pgm(tmp.path / "bad.pgm"), FormatError);
    std::ofstream(tmp.path / "short.pgm", std::ios::binary) << "P5\n4 4\n255\n" << std::string(5, '\0');
    CHECK_THROWS_AS(read_pgm(tmp.path / "short.pgm"), FormatError);
    CHECK_THROWS_AS(read_pgm(tmp.path / "missing.pgm"), IoError);
  }
}

TEST_CASE("manifest") {
  TempDir tmp("manifest");
  DatasetManifest m;
  m.root = tmp.path;
  m.volumes = {{"a", {"a/i0.pgm", "a/i1.pgm"}, {"a/m0.pgm", "a/m1.pgm"}, 32, 32}, {"b", {"b/i0.pgm"}, {"b/m0.pgm"}, 32, 32}};
  m.save();
  const auto j = nlohmann::json::parse(slurp(tmp.path / kManifestName));
  REQUIRE(j.at("volumes").size() == 2);
  for (const char* key : {"id", "images", "masks", "height", "width"}) CHECK(j["volumes"][0].contains(key));

  const auto back = DatasetManifest::load(tmp.path);
  CHECK(back.slice_count() == 3);
  CHECK(back.volumes[0].masks == m.volumes[0].masks);

  auto broken = j;
  broken["volumes"][0]["masks"].erase(1);
  CHECK_THROWS_AS(DatasetManifest::from_json(broken, tmp.path), FormatError);
  broken = j;
  broken["volumes"][1]["id"] = "a";
  CHECK_THROWS_AS(DatasetManifest::from_json(broken, tmp.path), FormatError);
  CHECK_THROWS_AS(DatasetManifest::from_json(nlohmann::json::array(), tmp.path), FormatError);
  CHECK_THROWS_AS(DatasetManifest::load(tmp.path / "nowhere"), IoError);
}

TEST_CASE("synthetic data is deterministic in the seed") {
  TempDir a("synth_a"), b("synth_b"), c("synth_c");
  const auto sa = generate_synthetic(tiny(), a.path);
  generate_synthetic(tiny(), b.path);
  auto other = tiny();
  other.seed = 6;
  generate_synthetic(other, c.path);
  CHECK(sa.slices == 12);
  bool any_difference = false;
  for (const auto& vol : sa.manifest.volumes) {
    for (std::size_t s = 0; s < vol.images.size(); ++s) {
      for (const auto& rel : {vol.images[s], vol.masks[s]}) {
        CHECK(slurp(a.path / rel) == slurp(b.path / rel));
        any_difference |= slurp(a.path / rel) != slurp(c.path / rel);
      }
    }
  }
  CHECK(any_difference);
  CHECK(slurp(a.path / kManifestName) == slurp(b.path / kManifestName));

  CHECK_THROWS_AS(generate_synthetic([] {
                    auto o = tiny();
                    o.height = 40;
                    return o;
                  }(),
                                     a.path / "bad"),
                  ConfigError);
}

TEST_CASE("synthetic masks") {
  SUBCASE("no lesions gives empty masks") {
    auto o = tiny(2, 5);
    o.lesions_per_slice = 0;
    for (Index v = 0; v < 2; ++v)
      for (const auto& s : synthesize_volume(o, v)) CHECK(std::all_of(s.mask.begin(), s.mask.end(), [](auto m) { return m == 0; }));
  }
  SUBCASE("masks equal the ellipse union") {
    auto o = tiny(4, 6);
    for (Index v = 0; v < 4; ++v)
      for (const auto& s : synthesize_volume(o, v)) CHECK(s.mask == oracle::ellipse_mask(s.lesions, o.height, o.width));
  }
  SUBCASE("lesion geometry and counts") {
    auto o = tiny(10, 10);
    std::set<std::size_t> counts;
    for (Index v = 0; v < 10; ++v)
      for (const auto& s : synthesize_volume(o, v)) {
        counts.insert(s.lesions.size());
        for (const auto& e : s.lesions) {
          const double side = static_cast<double>(std::min(o.height, o.width));
          CHECK(e.radius_row >= 0.03 * side);
          CHECK(e.radius_row <= 0.25 * side);
          CHECK(e.radius_col >= 0.03 * side);
          CHECK(e.radius_col <= 0.25 * side);
        }
      }
    CHECK(counts == std::set<std::size_t>{0, 1, 2, 3});
  }
  SUBCASE("lesion fraction over fifty volumes") {
    SyntheticOptions o;
    o.volumes = 50;
    o.slices_per_volume = 10;
    std::uint64_t lesion = 0, total = 0;
    for (Index v = 0; v < o.volumes; ++v)
      for (const auto& s : synthesize_volume(o, v)) {
        lesion += static_cast<std::uint64_t>(std::count(s.mask.begin(), s.mask.end(), 1));
        total += s.mask.size();
      }
    const double fraction = static_cast<double>(lesion) / static_cast<double>(total);
    CHECK(fraction > 0.001);
    CHECK(fraction < 0.20);
  }
}

TEST_CASE("center crop") {
  CHECK(crop_offsets(233, 197, 224, 192) == std::pair<Index, Index>{4, 2});
  CHECK(crop_offsets(5, 5, 4, 4) == std::pair<Index, Index>{0, 0});
  CHECK_THROWS_AS(crop_offsets(10, 10, 12, 8), ShapeError);

  std::vector<int> ramp(233 * 197);
  for (Index r = 0; r < 233; ++r)
    for (Index c = 0; c < 197; ++c) ramp[static_cast<std::size_t>(r * 197 + c)] = static_cast<int>(r * 1000 + c);
  const auto out = center_crop<int>(ramp, 233, 197, 224, 192);
  for (Index r = 0; r < 224; ++r)
    for (Index c = 0; c < 192; ++c) CHECK(out[static_cast<std::size_t>(r * 192 + c)] == (r + 4) * 1000 + c + 2);

  CHECK(center_crop<int>(ramp, 233, 197, 233, 197) == ramp);

  std::mt19937_64 rng(1);
  const auto t = TensorD::randn({7, 9}, rng);
  const auto ct = center_crop(t, 4, 4);
  CHECK(ct.shape() == Shape{4, 4});
  CHECK(ct.at({0, 0}) == t.at({1, 2}));

  CHECK(floor_to_multiple_of_16(233) == 224);
  CHECK(floor_to_multiple_of_16(197) == 192);
  CHECK(floor_to_multiple_of_16(64) == 64);
}

TEST_CASE("intensity normalization") {
  const std::vector<float> v{0, 5, 10};
  CHECK(normalize_intensity(v) == std::vector<float>{0, 0.5f, 1});
  CHECK(normalize_intensity(std::vector<float>(6, 3.5f)) == std::vector<float>(6, 0.0f));
  std::mt19937_64 rng(2);
  std::normal_distribution<float> d(100, 40);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> x(200);
    for (auto& e : x) e = d(rng);
    const auto n = normalize_intensity(x);
    CHECK(*std::min_element(n.begin(), n.end()) == 0);
    CHECK(*std::max_element(n.begin(), n.end()) == 1);
  }
  CHECK_THROWS_AS(normalize_intensity(std::vector<float>{1, std::nanf(""), 2}), NumericError);
  CHECK_THROWS_AS(normalize_intensity(std::vector<float>{1, INFINITY}), NumericError);
}

TEST_CASE("fold split") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("v" + std::to_string(i));
  const auto f = split_folds(ids, 5, 3);
  std::set<std::string> seen;
  for (int k = 0; k < 5; ++k) {
    const auto fold = f.fold(k);
    CHECK(fold.size() == 2);
    for (const auto& id : fold) CHECK(seen.insert(id).second);
    CHECK(f.complement(k).size() == 8);
  }
  CHECK(seen.size() == 10);

  const auto again = split_folds(ids, 5, 3);
  CHECK(again.fold_of == f.fold_of);
  CHECK(again.order == f.order);

  for (std::size_t n = 5; n <= 23; ++n) {
    std::vector<std::string> many;
    for (std::size_t i = 0; i < n; ++i) many.push_back("x" + std::to_string(i));
    const auto g = split_folds(many, 5, n);
    std::size_t lo = n, hi = 0, sum = 0;
    for (int k = 0; k < 5; ++k) {
      lo = std::min(lo, g.fold(k).size());
      hi = std::max(hi, g.fold(k).size());
      sum += g.fold(k).size();
    }
    CHECK(hi - lo <= 1);
    CHECK(sum == n);
  }

  CHECK_THROWS_AS(split_folds(std::vector<std::string>{"a", "b", "c"}, 5, 1), ConfigError);
  CHECK_THROWS_AS(f.fold(5), ConfigError);
}

TEST_CASE("dataset loading and batching") {
  TempDir tmp("batches");
  auto o = tiny(5, 4);
  const auto summary = generate_synthetic(o, tmp.path);
  const auto manifest = DatasetManifest::load(tmp.path);
  const auto ds = load_dataset(manifest);
  CHECK(ds.height == 32);
  CHECK(ds.width == 48);
  REQUIRE(ds.volumes.size() == 5);

  // Stored masks equal the generator's masks; each volume spans [0,1].
  for (Index v = 0; v < 5; ++v) {
    const auto slices = synthesize_volume(o, v);
    float lo = 1, hi = 0;
    for (std::size_t s = 0; s < slices.size(); ++s) {
      CHECK(ds.volumes[static_cast<std::size_t>(v)].slices[s].mask == slices[s].mask);
      for (float x : ds.volumes[static_cast<std::size_t>(v)].slices[s].image) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
    CHECK(lo == 0);
    CHECK(hi == 1);
  }

  const auto cropped = load_dataset(manifest, std::pair<Index, Index>{16, 32});
  CHECK(cropped.height == 16);
  CHECK(cropped.volumes[0].slices[0].image.size() == 16u * 32u);

  SUBCASE("20 slices in batches of 8") {
    BatchStream<float> stream(all_volumes(ds), ds.height, ds.width, 8, 11);
    CHECK(stream.slice_count() == 20);
    const auto batches = stream.epoch(0);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].images.dim(0) == 8);
    CHECK(batches[1].images.dim(0) == 8);
    CHECK(batches[2].images.dim(0) == 4);
    CHECK(batches[2].images.shape() == Shape{4, 1, 32, 48});
  }
  SUBCASE("epoch order seeding") {
    BatchStream<float> s1(all_volumes(ds), ds.height, ds.width, 8, 11);
    BatchStream<float> s2(all_volumes(ds), ds.height, ds.width, 8, 11);
    CHECK(s1.epoch_order(0) == s2.epoch_order(0));
    CHECK(s1.epoch_order(0) != s1.epoch_order(1));
    auto sorted = s1.epoch_order(3);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    BatchStream<float> fixed(all_volumes(ds), ds.height, ds.width, 8, 11, false);
    CHECK(fixed.epoch_order(0) == fixed.epoch_order(5));
  }
  SUBCASE("pairing is index-exact and masks stay binary") {
    BatchStream<double> stream(all_volumes(ds), ds.height, ds.width, 8, 2);
    for (std::size_t e = 0; e < 2; ++e) {
      for (const auto& batch : stream.epoch(e)) {
        const Index px = ds.height * ds.width;
        for (std::size_t row = 0; row < batch.origin.size(); ++row) {
          const auto& [vid, idx] = batch.origin[row];
          const auto& slice = ds.volume(vid).slices[static_cast<std::size_t>(idx)];
          CHECK(slice.index == idx);
          for (Index p = 0; p < px; ++p) {
            const auto u = static_cast<std::size_t>(static_cast<Index>(row) * px + p);
            CHECK(batch.images.data()[u] == static_cast<double>(slice.image[static_cast<std::size_t>(p)]));
            CHECK(batch.masks.data()[u] == static_cast<double>(slice.mask[static_cast<std::size_t>(p)]));
          }
        }
      }
    }
  }
  SUBCASE("folds select whole volumes") {
    const auto folds = split_folds(manifest, 5, 7);
    const auto val = ds.select(folds.fold(0));
    const auto train = ds.select(folds.complement(0));
    CHECK(val.size() == 1);
    CHECK(train.size() == 4);
    for (const auto* t : train) CHECK(t->id != val[0]->id);
    CHECK_THROWS_AS(ds.volume("nope"), ConfigError);
  }
  CHECK(summary.lesion_fraction > 0);
}
