#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "pnc/grid.hpp"

using namespace pnc;
using namespace pnc::grid;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "pnc_grid_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

PrecipSequence random_sequence(Rng& rng, int t, int h, int w, int step) {
  GridShape shape{h, w, 1};
  std::vector<PrecipFrame> frames;
  for (int i = 0; i < t; ++i) {
    std::vector<float> v(shape.pixel_count());
    for (auto& x : v) x = static_cast<float>(rng.uniform() * 20.0);
    frames.push_back(make_precip_frame(shape, std::move(v), i * step));
  }
  return make_precip_sequence(std::move(frames), step);
}

}  // namespace

TEST_CASE("shape validation", "[grid]") {
  CHECK_THROWS_AS((GridShape{0, 4, 1}).validate(), ValidationError);
  CHECK_THROWS_AS((GridShape{4, -1, 1}).validate(), ValidationError);
  CHECK_NOTHROW((GridShape{1, 1, 1}).validate());
}

TEST_CASE("precip frame rejects negatives and non-finite values", "[grid]") {
  GridShape shape{2, 2, 1};
  CHECK_THROWS_AS(make_precip_frame(shape, {1.f, 2.f, -0.5f, 0.f}, 0), ValidationError);
  CHECK_THROWS_MATCHES(
      make_precip_frame(shape, {1.f, std::nanf(""), 0.f, 0.f}, 0), ValidationError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("index 1")));
  CHECK_THROWS_AS(make_precip_frame(shape, {1.f, 2.f, 3.f}, 0), ValidationError);
}

TEST_CASE("sequence timestamps must step uniformly", "[grid]") {
  GridShape shape{1, 1, 1};
  auto f = [&](int t) { return make_precip_frame(shape, {0.f}, t); };
  CHECK_NOTHROW(make_precip_sequence({f(0), f(30), f(60)}, 30));
  CHECK_THROWS_AS(make_precip_sequence({f(0), f(30), f(90)}, 30), ValidationError);
  CHECK_THROWS_AS(make_precip_sequence({f(0), f(0)}, 30), ValidationError);
}

TEST_CASE("split_sequence splits 9 frames into 3 + 6", "[grid]") {
  Rng rng(7);
  auto seq = random_sequence(rng, 9, 4, 4, 30);
  auto [cond, target] = split_sequence(seq, 3, 6);
  REQUIRE(cond.frames.size() == 3);
  REQUIRE(target.frames.size() == 6);
  CHECK(cond.frames[0].timestamp_min == 0);
  CHECK(cond.frames[2].timestamp_min == 60);
  CHECK(target.frames[0].timestamp_min == 90);
  CHECK(target.frames[5].timestamp_min == 240);
  CHECK(target.frames[0].values == seq.frames[3].values);

  auto two = random_sequence(rng, 2, 2, 2, 30);
  auto [a, b] = split_sequence(two, 1, 1);
  CHECK(a.frames[0].values == two.frames[0].values);
  CHECK(b.frames[0].values == two.frames[1].values);

  auto five = random_sequence(rng, 5, 2, 2, 30);
  CHECK_THROWS_AS(split_sequence(five, 3, 6), ArityError);
}

TEST_CASE("PNWG header is 64 bytes and 2x2 zero grid round-trips", "[grid]") {
  GridShape shape{2, 2, 1};
  auto seq = make_precip_sequence({make_precip_frame(shape, {0, 0, 0, 0}, 0)}, 30);
  auto path = temp_file("zero.pnwg");
  write_grid_file(seq, path);
  CHECK(std::filesystem::file_size(path) == 64 + 16);
  auto back = read_precip_file(path);
  REQUIRE(back.frames.size() == 1);
  CHECK(back.step_minutes == 30);
  CHECK(back.frames[0].values == seq.frames[0].values);
}

TEST_CASE("PNWG round-trip is bit-exact over random sequences", "[grid]") {
  Rng rng(42);
  for (int trial = 0; trial < 25; ++trial) {
    const int t = 1 + static_cast<int>(rng.uniform_int(9));
    const int h = 1 + static_cast<int>(rng.uniform_int(12));
    const int w = 1 + static_cast<int>(rng.uniform_int(12));
    const int step = 5 + static_cast<int>(rng.uniform_int(60));
    auto seq = random_sequence(rng, t, h, w, step);
    auto path = temp_file("roundtrip.pnwg");
    write_grid_file(seq, path);
    auto back = read_precip_file(path);
    REQUIRE(back.frames.size() == seq.frames.size());
    CHECK(back.step_minutes == seq.step_minutes);
    for (size_t i = 0; i < seq.frames.size(); ++i) {
      REQUIRE(std::memcmp(back.frames[i].values.data(), seq.frames[i].values.data(),
                          seq.frames[i].values.size() * sizeof(float)) == 0);
      CHECK(back.frames[i].timestamp_min == seq.frames[i].timestamp_min);
    }
  }
}

TEST_CASE("PNWG 9-frame 256x256 sequence round-trips", "[grid]") {
  Rng rng(3);
  auto seq = random_sequence(rng, 9, 256, 256, 30);
  auto path = temp_file("large.pnwg");
  write_grid_file(seq, path);
  auto back = read_precip_file(path);
  for (size_t i = 0; i < 9; ++i) {
    REQUIRE(std::memcmp(back.frames[i].values.data(), seq.frames[i].values.data(),
                        seq.frames[i].values.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("meteo series round-trip is bit-exact", "[grid]") {
  Rng rng(11);
  GridShape shape{4, 5, MeteoStack::kFieldCount};
  std::vector<MeteoStack> stacks;
  for (int t = 0; t < 3; ++t) {
    MeteoStack st;
    st.shape = shape;
    st.pixel_size_km = 1.0f;
    st.timestamp_min = t * 30;
    const size_t pixels = shape.pixel_count();
    for (int f = 0; f < MeteoStack::kFieldCount; ++f) st.field(f).resize(pixels);
    for (size_t p = 0; p < pixels; ++p) {
      st.q[p] = static_cast<float>(rng.uniform() * 0.01);
      st.u10[p] = static_cast<float>(rng.normal());
      st.v10[p] = static_cast<float>(rng.normal());
      st.u100[p] = static_cast<float>(rng.normal());
      st.v100[p] = static_cast<float>(rng.normal());
      st.r_s[p] = static_cast<float>(rng.uniform() * 500.0);
      st.temp[p] = static_cast<float>(10.0 + rng.uniform() * 10.0);
      st.dew[p] = st.temp[p] - static_cast<float>(rng.uniform() * 5.0);
    }
    stacks.push_back(std::move(st));
  }
  auto series = make_meteo_series(std::move(stacks), 30);
  auto path = temp_file("meteo.pnwg");
  write_grid_file(series, path);
  auto back = read_meteo_file(path);
  REQUIRE(back.stacks.size() == 3);
  for (int t = 0; t < 3; ++t) {
    for (int f = 0; f < MeteoStack::kFieldCount; ++f) {
      REQUIRE(std::memcmp(back.stacks[t].field(f).data(), series.stacks[t].field(f).data(),
                          series.stacks[t].field(f).size() * sizeof(float)) == 0);
    }
  }
}

TEST_CASE("PNWG reader rejects malformed files", "[grid]") {
  auto path = temp_file("bad.pnwg");

  SECTION("bad magic") {
    std::ofstream os(path, std::ios::binary);
    os << "XXXX";
    std::vector<char> rest(76, 0);
    os.write(rest.data(), static_cast<std::streamsize>(rest.size()));
    os.close();
    CHECK_THROWS_AS(read_grid_file(path), FormatError);
  }

  SECTION("declared 2x2x1 shape with only 3 floats") {
    GridShape shape{2, 2, 1};
    auto seq = make_precip_sequence({make_precip_frame(shape, {1, 2, 3, 4}, 0)}, 30);
    write_grid_file(seq, path);
    std::filesystem::resize_file(path, 64 + 12);
    CHECK_THROWS_AS(read_grid_file(path), LengthError);
  }

  SECTION("NaN in payload") {
    GridShape shape{2, 2, 1};
    auto seq = make_precip_sequence({make_precip_frame(shape, {1, 2, 3, 4}, 0)}, 30);
    write_grid_file(seq, path);
    std::fstream fs(path, std::ios::in | std::ios::out | std::ios::binary);
    fs.seekp(64 + 8);
    const float nan = std::nanf("");
    fs.write(reinterpret_cast<const char*>(&nan), sizeof(nan));
    fs.close();
    CHECK_THROWS_AS(read_grid_file(path), ValidationError);
  }

  SECTION("missing file") { CHECK_THROWS_AS(read_grid_file(temp_file("nope.pnwg")), IoError); }
}

TEST_CASE("gridded series carries masks and round-trips", "[grid]") {
  GriddedSeries g;
  g.t = 2;
  g.h = 3;
  g.w = 3;
  g.c = 1;
  g.values.assign(18, 0.0f);
  g.values[4] = 1.0f;
  auto path = temp_file("mask.pnwg");
  write_grid_file(g, path);
  auto back = read_grid_file(path);
  auto* gs = std::get_if<GriddedSeries>(&back);
  REQUIRE(gs != nullptr);
  CHECK(gs->values == g.values);
}

TEST_CASE("station CSV round-trips and validates", "[grid]") {
  std::vector<StationObservation> obs = {
      {"stn_a", 1.5, 2.5, 0, "temp", 15.25},
      {"stn_b", 30.0, 12.0, 60, "temp", 14.0},
  };
  auto path = temp_file("stations.csv");
  write_station_csv(obs, path);
  auto back = read_station_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].station_id == "stn_a");
  CHECK(back[0].x_km == 1.5);
  CHECK(back[1].timestamp_min == 60);
  CHECK(back[1].value == 14.0);

  CHECK_NOTHROW(validate_station_positions(back, GridShape{32, 32, 1}, 1.0, 10.0));
  std::vector<StationObservation> far = {{"far", 500.0, 0.0, 0, "temp", 1.0}};
  CHECK_THROWS_AS(validate_station_positions(far, GridShape{32, 32, 1}, 1.0, 10.0),
                  ValidationError);
}
