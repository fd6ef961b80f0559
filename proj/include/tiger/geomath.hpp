#pragma once

/// @file geomath.hpp
/// @brief Sphere and torus geometry: great-circle distance, HEALPix RING
/// pixelization, timestamp to torus mapping and the 12x24 time bins.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tiger {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kEarthRadiusKm = 6371.0;
inline constexpr double kDegToRad = kPi / 180.0;
inline constexpr double kRadToDeg = 180.0 / kPi;

inline constexpr int kMonthBins = 12;
inline constexpr int kHourBins = 24;
inline constexpr int kTimeBins = kMonthBins * kHourBins;  // 288

/// Latitude/longitude in degrees. Longitude is wrapped into [-180, 180).
class GeoCoord {
 public:
  GeoCoord() = default;
  /// Throws std::out_of_range if |lat| > 90 or either value is non-finite.
  GeoCoord(double lat_deg, double lon_deg);

  double lat() const { return lat_; }
  double lon() const { return lon_; }

  /// Colatitude in radians, [0, pi].
  double colatitude() const { return (90.0 - lat_) * kDegToRad; }
  /// Azimuth in radians, [0, 2pi).
  double azimuth() const;

  static GeoCoord from_colat_azimuth(double colat_rad, double azimuth_rad);

  friend bool operator==(const GeoCoord&, const GeoCoord&) = default;

 private:
  double lat_ = 0.0;
  double lon_ = 0.0;
};

/// A point on the flat unit torus: theta is the year fraction, phi the day
/// fraction. Both coordinates are wrapped into [0, 1).
class TorusTime {
 public:
  TorusTime() = default;
  TorusTime(double theta, double phi);

  double theta() const { return theta_; }
  double phi() const { return phi_; }

  friend bool operator==(const TorusTime&, const TorusTime&) = default;

 private:
  double theta_ = 0.0;
  double phi_ = 0.0;
};

/// Wraps x into [0, 1).
double wrap_unit(double x);

/// Civil date-time with one-second resolution, camera-local.
struct Timestamp {
  int year = 1970;
  int month = 1;   // 1..12
  int day = 1;     // 1..31
  int hour = 0;    // 0..23
  int minute = 0;  // 0..59
  int second = 0;  // 0..59

  /// Throws std::invalid_argument for an impossible calendar date or time.
  void validate() const;

  /// "YYYY-MM-DDTHH:MM:SS".
  std::string to_iso() const;
  /// Accepts "YYYY-MM-DDTHH:MM:SS" (a space separator is also accepted).
  static Timestamp parse_iso(std::string_view text);

  /// Seconds since 1970-01-01T00:00:00 of the same (local) clock.
  std::int64_t to_epoch_seconds() const;
  static Timestamp from_epoch_seconds(std::int64_t seconds);

  friend auto operator<=>(const Timestamp&, const Timestamp&) = default;
};

bool is_leap_year(int year);
int days_in_year(int year);

/// HEALPix cell label in the RING scheme.
struct CellId {
  int nside = 1;
  std::int64_t index = 0;
  friend bool operator==(const CellId&, const CellId&) = default;
};

/// Month/hour time class. Flat index is hour * 12 + month.
struct TimeBinId {
  int month = 0;  // 0..11
  int hour = 0;   // 0..23

  int flat() const { return hour * kMonthBins + month; }
  static TimeBinId from_flat(int flat);
  friend bool operator==(const TimeBinId&, const TimeBinId&) = default;
};

/// Great-circle distance, R = 6371 km.
double haversine_km(const GeoCoord& a, const GeoCoord& b);

TorusTime timestamp_to_torus(const Timestamp& ts);

/// Geodesic distance on the flat unit torus, in [0, sqrt(0.5)].
double torus_distance(const TorusTime& a, const TorusTime& b);

/// Shortest signed-free distance between two points of the unit circle.
double circular_gap(double a, double b);

bool is_valid_nside(int nside);
std::int64_t cell_count(int nside);

/// RING-scheme ang2pix. Throws std::invalid_argument for a bad nside.
CellId geo_to_cell(const GeoCoord& c, int nside);

/// RING-scheme pix2ang. Throws std::out_of_range for an invalid index.
GeoCoord cell_center(const CellId& id);

TimeBinId torus_to_bin(const TorusTime& t);
TorusTime bin_center(const TimeBinId& b);

}  // namespace tiger
