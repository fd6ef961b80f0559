#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "tiger/geomath.hpp"

using namespace tiger;

namespace {

// Spherical law of cosines, an independent great-circle oracle.
double law_of_cosines_km(const GeoCoord& a, const GeoCoord& b) {
  const double p1 = a.lat() * kDegToRad, p2 = b.lat() * kDegToRad;
  const double dl = (b.lon() - a.lon()) * kDegToRad;
  double c = std::sin(p1) * std::sin(p2) + std::cos(p1) * std::cos(p2) * std::cos(dl);
  c = std::clamp(c, -1.0, 1.0);
  return std::acos(c) * kEarthRadiusKm;
}

// Reference RING ang2pix after the original Fortran construction.
long reference_ang2pix_ring(long nside, double theta, double phi) {
  const double z = std::cos(theta), za = std::fabs(z);
  const double twopi = 2.0 * kPi;
  if (phi >= twopi) phi -= twopi;
  if (phi < 0.0) phi += twopi;
  const double tt = phi / (0.5 * kPi);
  const long nl4 = 4 * nside, ncap = 2 * nside * (nside - 1), npix = 12 * nside * nside;
  long ipix1;
  if (za <= 2.0 / 3.0) {
    const long jp = static_cast<long>(std::floor(nside * (0.5 + tt - z * 0.75)));
    const long jm = static_cast<long>(std::floor(nside * (0.5 + tt + z * 0.75)));
    const long ir = nside + 1 + jp - jm;
    const long kshift = ir % 2 == 0 ? 1 : 0;
    long ip = (jp + jm - nside + kshift + 1) / 2 + 1;
    if (ip > nl4) ip -= nl4;
    ipix1 = ncap + nl4 * (ir - 1) + ip;
  } else {
    const double tp = tt - std::floor(tt);
    const double tmp = std::sqrt(3.0 * (1.0 - za));
    const long jp = static_cast<long>(std::floor(nside * tp * tmp));
    const long jm = static_cast<long>(std::floor(nside * (1.0 - tp) * tmp));
    const long ir = jp + jm + 1;
    long ip = static_cast<long>(std::floor(tt * ir)) + 1;
    if (ip > 4 * ir) ip -= 4 * ir;
    ipix1 = z > 0 ? 2 * ir * (ir - 1) + ip : npix - 2 * ir * (ir + 1) + ip;
  }
  return ipix1 - 1;
}

GeoCoord random_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double z = 2.0 * u(rng) - 1.0;
  return GeoCoord::from_colat_azimuth(std::acos(z), 2.0 * kPi * u(rng));
}

}  // namespace

TEST_CASE("GeoCoord normalizes longitude and rejects bad latitude") {
  CHECK(GeoCoord(10, 180).lon() == doctest::Approx(-180));
  CHECK(GeoCoord(10, 190).lon() == doctest::Approx(-170));
  CHECK(GeoCoord(10, -180).lon() == doctest::Approx(-180));
  CHECK_THROWS_AS(GeoCoord(90.5, 0), std::out_of_range);
  CHECK_THROWS_AS(GeoCoord(NAN, 0), std::out_of_range);
}

TEST_CASE("haversine examples") {
  CHECK(haversine_km({0, 0}, {0, 0}) == 0.0);
  CHECK(std::abs(haversine_km({0, 0}, {0, 179.9999999}) - 20015.09) < 0.05);
  CHECK(std::abs(law_of_cosines_km({0, 0}, {0, 179.9999999}) - 20015.09) < 0.05);
  CHECK(std::abs(haversine_km({90, 0}, {0, 0}) - 10007.54) < 0.05);
}

TEST_CASE("haversine agrees with law of cosines, is symmetric and obeys the triangle inequality") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    const GeoCoord a = random_point(rng), b = random_point(rng), c = random_point(rng);
    const double ab = haversine_km(a, b);
    CHECK(ab == haversine_km(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= kPi * kEarthRadiusKm + 1e-9);
    CHECK(std::abs(ab - law_of_cosines_km(a, b)) < 1e-3);
    CHECK(haversine_km(a, c) <= ab + haversine_km(b, c) + 1e-6);
  }
}

TEST_CASE("timestamp to torus examples") {
  const TorusTime t0 = timestamp_to_torus(Timestamp{2023, 1, 1, 0, 0, 0});
  CHECK(t0.theta() == 0.0);
  CHECK(t0.phi() == 0.0);

  // 182.5 days after Jan 1 of a 365-day year is Jul 2 at noon.
  const TorusTime mid = timestamp_to_torus(Timestamp{2023, 7, 2, 12, 0, 0});
  CHECK(mid.theta() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(mid.phi() == doctest::Approx(0.5).epsilon(1e-15));

  const TorusTime end = timestamp_to_torus(Timestamp{2023, 12, 31, 23, 59, 59});
  const double year = 365.0 * 86400.0;
  CHECK(end.theta() == doctest::Approx((year - 1.0) / year).epsilon(1e-15));
  CHECK(end.phi() == doctest::Approx(86399.0 / 86400.0).epsilon(1e-15));
  CHECK(std::abs(end.theta() - 0.99999997) < 1e-8);
  CHECK(std::abs(end.phi() - 0.9999884) < 1e-7);

  // Leap year: Dec 31 noon of 2024 is day 365 of 366.
  const TorusTime leap = timestamp_to_torus(Timestamp{2024, 12, 31, 12, 0, 0});
  CHECK(leap.theta() == doctest::Approx(365.5 / 366.0).epsilon(1e-15));
}

TEST_CASE("Timestamp ISO and epoch round trips") {
  const Timestamp ts = Timestamp::parse_iso("2024-02-29T13:45:07");
  CHECK(ts.to_iso() == "2024-02-29T13:45:07");
  CHECK(Timestamp::from_epoch_seconds(ts.to_epoch_seconds()) == ts);
  CHECK(Timestamp::parse_iso("2024-02-29 13:45:07") == ts);
  CHECK_THROWS_AS(Timestamp::parse_iso("2023-02-29T00:00:00"), std::invalid_argument);
  CHECK_THROWS_AS(Timestamp::parse_iso("2023-1-01T00:00:00"), std::invalid_argument);
  CHECK_THROWS_AS(Timestamp::parse_iso("2023-01-01T24:00:00"), std::invalid_argument);
  CHECK(Timestamp{1970, 1, 1, 0, 0, 0}.to_epoch_seconds() == 0);
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::int64_t> s(-2'000'000'000LL, 4'000'000'000LL);
  for (int i = 0; i < 1000; ++i) {
    const std::int64_t e = s(rng);
    const Timestamp t = Timestamp::from_epoch_seconds(e);
    CHECK(t.to_epoch_seconds() == e);
    CHECK(Timestamp::parse_iso(t.to_iso()) == t);
  }
}

TEST_CASE("torus distance examples and properties") {
  CHECK(torus_distance({0.3, 0.4}, {0.3, 0.4}) == 0.0);
  CHECK(torus_distance({0, 0}, {0.5, 0}) == doctest::Approx(0.5));
  CHECK(torus_distance({0.95, 0}, {0.05, 0}) == doctest::Approx(0.1));
  CHECK(torus_distance({0, 0}, {0.5, 0.5}) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(TorusTime(1.25, -0.25) == TorusTime(0.25, 0.75));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-3, 3);
  for (int i = 0; i < 5000; ++i) {
    const TorusTime a(u(rng), u(rng)), b(u(rng), u(rng));
    const double d = torus_distance(a, b);
    CHECK(d == torus_distance(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= std::sqrt(0.5) + 1e-15);
    const TorusTime a2(a.theta() + shift(rng), a.phi() + shift(rng));
    CHECK(torus_distance(a2, b) == doctest::Approx(d).epsilon(1e-12));
  }
}

TEST_CASE("cell counts and validity") {
  for (int nside : {1, 2, 4, 8, 16}) CHECK(cell_count(nside) == 12LL * nside * nside);
  CHECK(cell_count(8) == 768);
  CHECK_FALSE(is_valid_nside(3));
  CHECK_FALSE(is_valid_nside(0));
  CHECK_THROWS_AS(geo_to_cell({0, 0}, 3), std::invalid_argument);
  CHECK_THROWS_AS(cell_center({8, 768}), std::out_of_range);
  CHECK_THROWS_AS(cell_center({8, -1}), std::out_of_range);
}

TEST_CASE("every index is reached: nside 1 gives 0..11 and nside 8 gives 768 cells") {
  std::mt19937_64 rng(5);
  for (int nside : {1, 8}) {
    std::set<std::int64_t> seen;
    for (int i = 0; i < 200000; ++i) seen.insert(geo_to_cell(random_point(rng), nside).index);
    CHECK(static_cast<std::int64_t>(seen.size()) == cell_count(nside));
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == cell_count(nside) - 1);
  }
}

TEST_CASE("geo_to_cell matches the reference ring construction") {
  std::mt19937_64 rng(6);
  for (int nside : {1, 2, 4, 8, 64}) {
    for (int i = 0; i < 10000; ++i) {
      const GeoCoord p = random_point(rng);
      CHECK(geo_to_cell(p, nside).index == reference_ang2pix_ring(nside, p.colatitude(), p.azimuth()));
    }
  }
  CHECK(geo_to_cell({90, 0}, 1).index == 0);
  CHECK(geo_to_cell({-90, 0}, 1).index == 8);
}

TEST_CASE("cell centers: round trip and base-pixel geometry") {
  for (int nside : {1, 2, 4, 8}) {
    for (std::int64_t i = 0; i < cell_count(nside); ++i) {
      CHECK(geo_to_cell(cell_center({nside, i}), nside).index == i);
    }
  }
  const double cap = std::asin(2.0 / 3.0) * kRadToDeg;
  CHECK(cap == doctest::Approx(41.8103).epsilon(1e-6));
  for (int i = 0; i < 4; ++i) CHECK(cell_center({1, i}).lat() == doctest::Approx(cap).epsilon(1e-12));
  for (int i = 4; i < 8; ++i) CHECK(std::abs(cell_center({1, i}).lat()) < 1e-12);
  for (int i = 8; i < 12; ++i) CHECK(cell_center({1, i}).lat() == doctest::Approx(-cap).epsilon(1e-12));
  CHECK(cell_center({1, 0}).lon() == doctest::Approx(45.0));
  CHECK(std::abs(cell_center({1, 4}).lon()) < 1e-12);
}

TEST_CASE("equal-area: occupancy within 3 sigma and total area 4 pi") {
  std::mt19937_64 rng(7);
  const int n = 1000000;
  const int nside = 2;
  const auto cells = static_cast<std::size_t>(cell_count(nside));
  std::vector<int> count(cells, 0);
  for (int i = 0; i < n; ++i) ++count[static_cast<std::size_t>(geo_to_cell(random_point(rng), nside).index)];
  const double p = 1.0 / static_cast<double>(cells);
  const double mean = n * p, sigma = std::sqrt(n * p * (1 - p));
  double area = 0.0;
  for (int c : count) {
    CHECK(std::abs(c - mean) <= 3.5 * sigma);
    area += 4.0 * kPi * c / n;
  }
  CHECK(area == doctest::Approx(4.0 * kPi).epsilon(0.01));
  int within3 = 0;
  for (int c : count) within3 += std::abs(c - mean) <= 3.0 * sigma;
  CHECK(within3 >= static_cast<int>(cells) - 1);
}

TEST_CASE("time bins") {
  CHECK(torus_to_bin({0.01, 0.01}) == TimeBinId{0, 0});
  const TorusTime c = bin_center({11, 23});
  CHECK(c.theta() == doctest::Approx(11.5 / 12.0).epsilon(1e-15));
  CHECK(c.phi() == doctest::Approx(23.5 / 24.0).epsilon(1e-15));
  CHECK(std::abs(c.theta() - 0.95833) < 1e-5);
  CHECK(std::abs(c.phi() - 0.97916) < 1e-5);
  std::set<int> flats;
  for (int i = 0; i < 240; ++i)
    for (int j = 0; j < 240; ++j) flats.insert(torus_to_bin({(i + 0.5) / 240.0, (j + 0.5) / 240.0}).flat());
  CHECK(flats.size() == 288);
  for (int f = 0; f < kTimeBins; ++f) {
    const TimeBinId b = TimeBinId::from_flat(f);
    CHECK(b.flat() == f);
    CHECK(torus_to_bin(bin_center(b)) == b);
  }
  CHECK(TimeBinId{5, 3}.flat() == 3 * 12 + 5);
}
