#include <doctest.h>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "rfa/dataset.hpp"

using namespace rfa;

namespace {

void put_u32be(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::string write_idx_images(const std::string& path, std::uint32_t magic,
                             std::uint32_t n, std::uint32_t rows,
                             std::uint32_t cols,
                             const std::vector<unsigned char>& pixels) {
  std::ofstream f(path, std::ios::binary);
  put_u32be(f, magic);
  put_u32be(f, n);
  put_u32be(f, rows);
  put_u32be(f, cols);
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  return path;
}

std::string write_idx_labels(const std::string& path, std::uint32_t magic,
                             std::uint32_t n,
                             const std::vector<unsigned char>& labels) {
  std::ofstream f(path, std::ios::binary);
  put_u32be(f, magic);
  put_u32be(f, n);
  f.write(reinterpret_cast<const char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
  return path;
}

}  // namespace

TEST_CASE("load_idx parses a tiny synthetic pair") {
  std::vector<unsigned char> px(3 * 2 * 2);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(i * 20);
  auto ip = write_idx_images("/tmp/rfa_t_imgs", 0x00000803u, 3, 2, 2, px);
  auto lp = write_idx_labels("/tmp/rfa_t_lbls", 0x00000801u, 3, {0, 2, 1});

  Dataset ds = load_idx(ip, lp);
  CHECK(ds.size() == 3);
  CHECK(ds.images.shape() == std::vector<std::size_t>{3, 1, 2, 2});
  CHECK(ds.labels == std::vector<int>{0, 2, 1});
  CHECK(ds.num_classes == 3);
  CHECK(ds.images[0] == doctest::Approx(0.0));
  CHECK(ds.images[1] == doctest::Approx(20.0 / 255.0));
  CHECK(ds.images[11] == doctest::Approx(220.0 / 255.0));
  std::remove(ip.c_str());
  std::remove(lp.c_str());
}

TEST_CASE("load_idx rejects malformed files") {
  std::vector<unsigned char> px(2 * 2 * 2, 1);
  SUBCASE("bad magic") {
    auto ip = write_idx_images("/tmp/rfa_t_badmagic", 0xdeadbeefu, 2, 2, 2, px);
    auto lp = write_idx_labels("/tmp/rfa_t_badmagic_l", 0x00000801u, 2, {0, 1});
    CHECK_THROWS_AS(load_idx(ip, lp), DataError);
    std::remove(ip.c_str());
    std::remove(lp.c_str());
  }
  SUBCASE("count mismatch") {
    auto ip = write_idx_images("/tmp/rfa_t_cm", 0x00000803u, 2, 2, 2, px);
    auto lp = write_idx_labels("/tmp/rfa_t_cm_l", 0x00000801u, 3, {0, 1, 0});
    CHECK_THROWS_AS(load_idx(ip, lp), DataError);
    std::remove(ip.c_str());
    std::remove(lp.c_str());
  }
  SUBCASE("truncated payload") {
    std::vector<unsigned char> short_px(5, 1);  // needs 8
    auto ip = write_idx_images("/tmp/rfa_t_tr", 0x00000803u, 2, 2, 2, short_px);
    auto lp = write_idx_labels("/tmp/rfa_t_tr_l", 0x00000801u, 2, {0, 1});
    CHECK_THROWS_AS(load_idx(ip, lp), DataError);
    std::remove(ip.c_str());
    std::remove(lp.c_str());
  }
}

TEST_CASE("synth_blobs invariants") {
  Dataset ds = synth_blobs(9, 50, 3, 8, 0.05);
  CHECK(ds.size() == 150);
  CHECK(ds.num_classes == 3);
  CHECK(ds.images.shape() == std::vector<std::size_t>{150, 1, 1, 8});
  for (double v : ds.images.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  SUBCASE("same seed is bitwise identical") {
    Dataset ds2 = synth_blobs(9, 50, 3, 8, 0.05);
    CHECK(std::vector<double>(ds.images.data().begin(), ds.images.data().end()) ==
          std::vector<double>(ds2.images.data().begin(), ds2.images.data().end()));
    CHECK(ds.labels == ds2.labels);
  }
  SUBCASE("zero spread collapses each class to a point") {
    Dataset d0 = synth_blobs(9, 10, 3, 8, 0.0);
    for (int c = 0; c < 3; ++c) {
      std::size_t first = static_cast<std::size_t>(-1);
      for (std::size_t i = 0; i < d0.size(); ++i) {
        if (d0.labels[i] != c) continue;
        if (first == static_cast<std::size_t>(-1)) {
          first = i;
          continue;
        }
        for (std::size_t j = 0; j < 8; ++j) {
          CHECK(d0.images[i * 8 + j] == d0.images[first * 8 + j]);
        }
      }
    }
  }
  SUBCASE("nearest-centroid separates small-spread blobs") {
    // centroid per class from the data itself; every point should be closest
    // to its own class centroid when spread << center spacing
    std::vector<std::vector<double>> cent(3, std::vector<double>(8, 0.0));
    std::vector<int> counts(3, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      counts[ds.labels[i]]++;
      for (std::size_t j = 0; j < 8; ++j) cent[ds.labels[i]][j] += ds.images[i * 8 + j];
    }
    for (int c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 8; ++j) cent[c][j] /= counts[c];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      double best = 1e300;
      int best_c = -1;
      for (int c = 0; c < 3; ++c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
          double diff = ds.images[i * 8 + j] - cent[c][j];
          d2 += diff * diff;
        }
        if (d2 < best) {
          best = d2;
          best_c = c;
        }
      }
      if (best_c == ds.labels[i]) ++correct;
    }
    CHECK(static_cast<double>(correct) / ds.size() >= 0.99);
  }
}

TEST_CASE("batches: sizes, coverage, determinism") {
  Dataset ds = synth_blobs(1, 5, 2, 4, 0.1);  // 10 samples
  BatchPlan plan;
  plan.batch_size = 3;
  plan.shuffle_seed = 77;

  auto bs = batches(ds, plan);
  REQUIRE(bs.size() == 4);
  CHECK(bs[0].labels.size() == 3);
  CHECK(bs[1].labels.size() == 3);
  CHECK(bs[2].labels.size() == 3);
  CHECK(bs[3].labels.size() == 1);  // short tail kept

  SUBCASE("drop_last drops the short tail") {
    plan.drop_last = true;
    CHECK(batches(ds, plan).size() == 3);
  }
  SUBCASE("every sample appears exactly once") {
    // match rows back to the dataset by value
    std::multiset<std::vector<double>> seen;
    for (const auto& b : bs) {
      std::size_t n = b.labels.size();
      for (std::size_t i = 0; i < n; ++i) {
        seen.insert(std::vector<double>(b.images.data().begin() + i * 4,
                                        b.images.data().begin() + (i + 1) * 4));
      }
    }
    std::multiset<std::vector<double>> expect;
    for (std::size_t i = 0; i < 10; ++i) {
      expect.insert(std::vector<double>(ds.images.data().begin() + i * 4,
                                        ds.images.data().begin() + (i + 1) * 4));
    }
    CHECK(seen == expect);
  }
  SUBCASE("same seed gives the same order; a different seed does not") {
    auto bs2 = batches(ds, plan);
    CHECK(bs2[0].labels == bs[0].labels);
    plan.shuffle_seed = 78;
    auto bs3 = batches(ds, plan);
    bool any_diff = false;
    for (std::size_t b = 0; b < 3 && !any_diff; ++b)
      any_diff = bs3[b].labels != bs[b].labels;
    CHECK(any_diff);
  }
}

TEST_CASE("subset and take") {
  Dataset ds = synth_blobs(2, 4, 2, 4, 0.1);  // 8 samples
  Dataset s = ds.subset({7, 0, 3});
  CHECK(s.size() == 3);
  CHECK(s.labels[0] == ds.labels[7]);
  CHECK(s.images[0] == ds.images[7 * 4]);
  Dataset t = ds.take(5);
  CHECK(t.size() == 5);
  CHECK(t.labels[4] == ds.labels[4]);
}
