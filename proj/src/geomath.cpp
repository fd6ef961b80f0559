#include "tiger/geomath.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace tiger {

namespace {

constexpr double kTwoThirds = 2.0 / 3.0;
constexpr double kHalfPi = kPi / 2.0;
constexpr double kTwoPi = 2.0 * kPi;

// Days since 1970-01-01 in the proleptic Gregorian calendar.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& year, int& month, int& day) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  year = static_cast<int>(y + (m <= 2));
  month = static_cast<int>(m);
  day = static_cast<int>(d);
}

int days_in_month(int year, int month) {
  static constexpr int kDays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  if (month == 2 && is_leap_year(year)) return 29;
  return kDays[month - 1];
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t imodulo(std::int64_t v, std::int64_t m) {
  const std::int64_t r = v % m;
  return r < 0 ? r + m : r;
}

std::int64_t isqrt(std::int64_t v) {
  auto r = static_cast<std::int64_t>(std::sqrt(static_cast<double>(v) + 0.5));
  while (r * r > v) --r;
  while ((r + 1) * (r + 1) <= v) ++r;
  return r;
}

int parse_field(std::string_view text, std::size_t pos, std::size_t len) {
  if (pos + len > text.size()) throw std::invalid_argument("timestamp too short: " + std::string(text));
  int value = 0;
  const char* first = text.data() + pos;
  auto [ptr, ec] = std::from_chars(first, first + len, value);
  if (ec != std::errc{} || ptr != first + len) {
    throw std::invalid_argument("malformed timestamp: " + std::string(text));
  }
  return value;
}

}  // namespace

GeoCoord::GeoCoord(double lat_deg, double lon_deg) {
  if (!std::isfinite(lat_deg) || !std::isfinite(lon_deg)) {
    throw std::out_of_range("GeoCoord: non-finite coordinate");
  }
  if (lat_deg < -90.0 || lat_deg > 90.0) {
    throw std::out_of_range("GeoCoord: latitude " + std::to_string(lat_deg) + " outside [-90, 90]");
  }
  lat_ = lat_deg;
  double lon = std::fmod(lon_deg + 180.0, 360.0);
  if (lon < 0.0) lon += 360.0;
  lon -= 180.0;
  if (lon >= 180.0) lon -= 360.0;
  lon_ = lon;
}

double GeoCoord::azimuth() const {
  double a = lon_ * kDegToRad;
  if (a < 0.0) a += kTwoPi;
  if (a >= kTwoPi) a -= kTwoPi;
  return a;
}

GeoCoord GeoCoord::from_colat_azimuth(double colat_rad, double azimuth_rad) {
  const double lat = std::clamp(90.0 - colat_rad * kRadToDeg, -90.0, 90.0);
  return GeoCoord(lat, azimuth_rad * kRadToDeg);
}

double wrap_unit(double x) {
  double r = x - std::floor(x);
  // x slightly below an integer can round up to exactly 1.0
  if (r >= 1.0) r = 0.0;
  return r;
}

TorusTime::TorusTime(double theta, double phi) : theta_(wrap_unit(theta)), phi_(wrap_unit(phi)) {}

bool is_leap_year(int year) { return (year % 4 == 0 && year % 100 != 0) || year % 400 == 0; }

int days_in_year(int year) { return is_leap_year(year) ? 366 : 365; }

void Timestamp::validate() const {
  if (month < 1 || month > 12) throw std::invalid_argument("Timestamp: month out of range");
  if (day < 1 || day > days_in_month(year, month)) throw std::invalid_argument("Timestamp: day out of range");
  if (hour < 0 || hour > 23) throw std::invalid_argument("Timestamp: hour out of range");
  if (minute < 0 || minute > 59) throw std::invalid_argument("Timestamp: minute out of range");
  if (second < 0 || second > 59) throw std::invalid_argument("Timestamp: second out of range");
}

std::string Timestamp::to_iso() const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d", year, month, day, hour, minute, second);
  return buf;
}

Timestamp Timestamp::parse_iso(std::string_view text) {
  if (text.size() != 19 || text[4] != '-' || text[7] != '-' || (text[10] != 'T' && text[10] != ' ') ||
      text[13] != ':' || text[16] != ':') {
    throw std::invalid_argument("malformed timestamp: " + std::string(text));
  }
  Timestamp ts;
  ts.year = parse_field(text, 0, 4);
  ts.month = parse_field(text, 5, 2);
  ts.day = parse_field(text, 8, 2);
  ts.hour = parse_field(text, 11, 2);
  ts.minute = parse_field(text, 14, 2);
  ts.second = parse_field(text, 17, 2);
  ts.validate();
  return ts;
}

std::int64_t Timestamp::to_epoch_seconds() const {
  const std::int64_t days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
  return days * 86400 + hour * 3600 + minute * 60 + second;
}

Timestamp Timestamp::from_epoch_seconds(std::int64_t seconds) {
  const std::int64_t days = floor_div(seconds, 86400);
  std::int64_t rem = seconds - days * 86400;
  Timestamp ts;
  civil_from_days(days, ts.year, ts.month, ts.day);
  ts.hour = static_cast<int>(rem / 3600);
  rem %= 3600;
  ts.minute = static_cast<int>(rem / 60);
  ts.second = static_cast<int>(rem % 60);
  return ts;
}

TimeBinId TimeBinId::from_flat(int flat) {
  if (flat < 0 || flat >= kTimeBins) throw std::out_of_range("TimeBinId: flat index out of range");
  return TimeBinId{flat % kMonthBins, flat / kMonthBins};
}

double haversine_km(const GeoCoord& a, const GeoCoord& b) {
  const double lat1 = a.lat() * kDegToRad;
  const double lat2 = b.lat() * kDegToRad;
  const double dlat = lat2 - lat1;
  const double dlon = (b.lon() - a.lon()) * kDegToRad;
  const double s1 = std::sin(dlat / 2.0);
  const double s2 = std::sin(dlon / 2.0);
  double h = s1 * s1 + std::cos(lat1) * std::cos(lat2) * s2 * s2;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

TorusTime timestamp_to_torus(const Timestamp& ts) {
  const std::int64_t year_start = Timestamp{ts.year, 1, 1, 0, 0, 0}.to_epoch_seconds();
  const double elapsed = static_cast<double>(ts.to_epoch_seconds() - year_start);
  const double year_len = static_cast<double>(days_in_year(ts.year)) * 86400.0;
  const double day_seconds = ts.hour * 3600.0 + ts.minute * 60.0 + ts.second;
  return TorusTime(elapsed / year_len, day_seconds / 86400.0);
}

double circular_gap(double a, double b) {
  const double d = std::fabs(wrap_unit(a) - wrap_unit(b));
  return std::min(d, 1.0 - d);
}

double torus_distance(const TorusTime& a, const TorusTime& b) {
  const double dt = circular_gap(a.theta(), b.theta());
  const double dp = circular_gap(a.phi(), b.phi());
  return std::sqrt(dt * dt + dp * dp);
}

bool is_valid_nside(int nside) { return nside >= 1 && nside <= (1 << 20) && (nside & (nside - 1)) == 0; }

std::int64_t cell_count(int nside) { return 12LL * nside * nside; }

CellId geo_to_cell(const GeoCoord& c, int nside) {
  if (!is_valid_nside(nside)) throw std::invalid_argument("geo_to_cell: nside must be a power of two");
  const std::int64_t ns = nside;
  const std::int64_t npix = 12 * ns * ns;
  const std::int64_t ncap = 2 * ns * (ns - 1);
  const double z = std::cos(c.colatitude());
  const double za = std::fabs(z);
  const double tt = c.azimuth() / kHalfPi;  // [0, 4)

  if (za <= kTwoThirds) {
    const double temp1 = ns * (0.5 + tt);
    const double temp2 = ns * z * 0.75;
    const auto jp = static_cast<std::int64_t>(temp1 - temp2);
    const auto jm = static_cast<std::int64_t>(temp1 + temp2);
    const std::int64_t ir = ns + 1 + jp - jm;  // 1..2ns+1
    const std::int64_t kshift = 1 - (ir & 1);
    std::int64_t ip = (jp + jm - ns + kshift + 1) / 2;
    ip = imodulo(ip, 4 * ns);
    return CellId{nside, ncap + (ir - 1) * 4 * ns + ip};
  }

  const double tp = tt - std::floor(tt);
  const double tmp = ns * std::sqrt(3.0 * (1.0 - za));
  const auto jp = static_cast<std::int64_t>(tp * tmp);
  const auto jm = static_cast<std::int64_t>((1.0 - tp) * tmp);
  const std::int64_t ir = jp + jm + 1;
  std::int64_t ip = static_cast<std::int64_t>(tt * static_cast<double>(ir));
  ip = imodulo(ip, 4 * ir);
  if (z > 0) return CellId{nside, 2 * ir * (ir - 1) + ip};
  return CellId{nside, npix - 2 * ir * (ir + 1) + ip};
}

GeoCoord cell_center(const CellId& id) {
  if (!is_valid_nside(id.nside)) throw std::out_of_range("cell_center: invalid nside");
  const std::int64_t ns = id.nside;
  const std::int64_t npix = 12 * ns * ns;
  if (id.index < 0 || id.index >= npix) {
    throw std::out_of_range("cell_center: index " + std::to_string(id.index) + " outside [0, " +
                            std::to_string(npix) + ")");
  }
  const std::int64_t ncap = 2 * ns * (ns - 1);
  const double fact2 = 4.0 / static_cast<double>(npix);
  const double fact1 = static_cast<double>(2 * ns) * fact2;
  const std::int64_t pix = id.index;
  double z = 0.0;
  double phi = 0.0;

  if (pix < ncap) {
    const std::int64_t iring = (1 + isqrt(1 + 2 * pix)) >> 1;
    const std::int64_t iphi = (pix + 1) - 2 * iring * (iring - 1);
    z = 1.0 - static_cast<double>(iring * iring) * fact2;
    phi = (static_cast<double>(iphi) - 0.5) * kHalfPi / static_cast<double>(iring);
  } else if (pix < npix - ncap) {
    const std::int64_t ip = pix - ncap;
    const std::int64_t iring = ip / (4 * ns) + ns;
    const std::int64_t iphi = ip % (4 * ns) + 1;
    const double fodd = ((iring + ns) & 1) ? 1.0 : 0.5;
    z = static_cast<double>(2 * ns - iring) * fact1;
    phi = (static_cast<double>(iphi) - fodd) * kPi / static_cast<double>(2 * ns);
  } else {
    const std::int64_t ip = npix - pix;
    const std::int64_t iring = (1 + isqrt(2 * ip - 1)) >> 1;
    const std::int64_t iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1));
    z = -1.0 + static_cast<double>(iring * iring) * fact2;
    phi = (static_cast<double>(iphi) - 0.5) * kHalfPi / static_cast<double>(iring);
  }
  return GeoCoord::from_colat_azimuth(std::acos(std::clamp(z, -1.0, 1.0)), phi);
}

TimeBinId torus_to_bin(const TorusTime& t) {
  const int month = std::min(kMonthBins - 1, static_cast<int>(std::floor(t.theta() * kMonthBins)));
  const int hour = std::min(kHourBins - 1, static_cast<int>(std::floor(t.phi() * kHourBins)));
  return TimeBinId{month, hour};
}

TorusTime bin_center(const TimeBinId& b) {
  if (b.month < 0 || b.month >= kMonthBins || b.hour < 0 || b.hour >= kHourBins) {
    throw std::out_of_range("bin_center: invalid time bin");
  }
  return TorusTime((b.month + 0.5) / kMonthBins, (b.hour + 0.5) / kHourBins);
}

}  // namespace tiger
