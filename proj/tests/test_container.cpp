// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "faceadapt/container.hpp"

using namespace faceadapt;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove(p);
  return p;
}

Container sample_container() {
  Container c;
  MatX<float> w(2, 3);
  w << 1.5f, -2.0f, 0.25f, 4.0f, 0.0f, -1.0f;
  c.set_matrix("layer.weight", w);
  VecX<double> b(2);
  b << 0.125, -3.5;
  c.set_vector("layer.bias", b);
  c.metadata["format"] = "test";
  return c;
}

}  // namespace

TEST_CASE("file layout is the safetensors wire format") {
  auto path = temp_file("faceadapt_container_layout.bin");
  sample_container().save(path);

  std::ifstream in(path, std::ios::binary);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  REQUIRE(in.good());
  std::string header(header_len, '\0');
  in.read(header.data(), std::streamsize(header_len));
  REQUIRE(in.good());

  // The header must be standalone JSON with byte-accurate offsets.
  auto j = nlohmann::json::parse(header);
  CHECK(j.at("__metadata__").at("format") == "test");
  auto& wj = j.at("layer.weight");
  CHECK(wj.at("dtype") == "F32");
  CHECK(wj.at("shape") == std::vector<std::int64_t>{2, 3});
  auto& bj = j.at("layer.bias");
  CHECK(bj.at("dtype") == "F64");
  CHECK(bj.at("shape") == std::vector<std::int64_t>{2});

  // Offsets index into the byte region that starts right after the header,
  // are contiguous, and cover the rest of the file.
  std::uint64_t b0 = bj.at("data_offsets")[0], b1 = bj.at("data_offsets")[1];
  std::uint64_t w0 = wj.at("data_offsets")[0], w1 = wj.at("data_offsets")[1];
  CHECK(b1 - b0 == 2 * sizeof(double));
  CHECK(w1 - w0 == 6 * sizeof(float));
  CHECK(std::min(b0, w0) == 0);
  CHECK(std::max(b1, w1) == fs::file_size(path) - 8 - header_len);

  // Row-major payload: read back element (0, 1) of the weight by hand.
  in.seekg(std::streamoff(8 + header_len + w0 + 1 * sizeof(float)));
  float elem = 0;
  in.read(reinterpret_cast<char*>(&elem), sizeof(elem));
  CHECK(elem == -2.0f);
  fs::remove(path);
}

TEST_CASE("save then load preserves values, shapes and metadata") {
  auto path = temp_file("faceadapt_container_roundtrip.bin");
  Container c = sample_container();
  c.save(path);
  Container r = Container::load(path);

  CHECK(r.metadata.at("format") == "test");
  CHECK(r.at("layer.weight").shape == std::vector<std::int64_t>{2, 3});
  MatX<float> w = r.matrix<float>("layer.weight");
  CHECK(w(0, 2) == 0.25f);
  CHECK(w(1, 0) == 4.0f);
  VecX<double> b = r.vector<double>("layer.bias");
  CHECK(b(0) == 0.125);
  CHECK(b(1) == -3.5);
  fs::remove(path);
}

TEST_CASE("saving twice produces identical bytes") {
  auto p1 = temp_file("faceadapt_container_a.bin");
  auto p2 = temp_file("faceadapt_container_b.bin");
  sample_container().save(p1);
  sample_container().save(p2);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::string sa(std::istreambuf_iterator<char>(a), {});
  std::string sb(std::istreambuf_iterator<char>(b), {});
  CHECK(sa == sb);
  CHECK(!sa.empty());
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("fingerprint tracks content") {
  Container c = sample_container();
  const std::string f0 = c.fingerprint();
  CHECK(f0.size() == 16);
  CHECK(sample_container().fingerprint() == f0);

  Container d = sample_container();
  d.tensors["layer.weight"].data[0] ^= 1;  // flip one bit
  CHECK(d.fingerprint() != f0);

  Container e = sample_container();
  e.set_vector<double>("extra", VecX<double>::Zero(1));
  CHECK(e.fingerprint() != f0);

  // Metadata is advisory and not part of the identity.
  Container m = sample_container();
  m.metadata["format"] = "other";
  CHECK(m.fingerprint() == f0);
}

TEST_CASE("malformed files are rejected") {
  auto path = temp_file("faceadapt_container_bad.bin");

  SUBCASE("missing file") { CHECK_THROWS_AS(Container::load(path), DataError); }

  SUBCASE("truncated header") {
    std::ofstream out(path, std::ios::binary);
    std::uint64_t n = 100;
    out.write(reinterpret_cast<const char*>(&n), 8);
    out << "{";
    out.close();
    CHECK_THROWS_AS(Container::load(path), DataError);
  }

  SUBCASE("unsupported dtype") {
    std::ofstream out(path, std::ios::binary);
    std::string hdr = R"({"t":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
    std::uint64_t n = hdr.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out << hdr << std::string(8, '\0');
    out.close();
    CHECK_THROWS_AS(Container::load(path), DataError);
  }

  SUBCASE("offsets past end of file") {
    std::ofstream out(path, std::ios::binary);
    std::string hdr = R"({"t":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
    std::uint64_t n = hdr.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out << hdr << std::string(4, '\0');
    out.close();
    CHECK_THROWS_AS(Container::load(path), DataError);
  }

  fs::remove(path);
}

TEST_CASE("missing tensor lookups name the offender") {
  Container c = sample_container();
  CHECK(c.has("layer.weight"));
  CHECK(!c.has("nope"));
  try {
    c.at("nope");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("nope") != std::string::npos);
  }
}
