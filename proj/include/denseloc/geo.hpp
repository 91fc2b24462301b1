#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

namespace denseloc {

// Mean Earth radius in meters.
inline constexpr double kEarthRadiusM = 6371000.0;

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

// Great-circle distance between two lat/lon points (degrees), in meters.
inline double haversine_m(double lat1, double lon1, double lat2, double lon2) {
  const double phi1 = deg_to_rad(lat1);
  const double phi2 = deg_to_rad(lat2);
  const double dphi = deg_to_rad(lat2 - lat1);
  const double dlam = deg_to_rad(lon2 - lon1);
  const double sp = std::sin(dphi / 2.0);
  const double sl = std::sin(dlam / 2.0);
  const double a = sp * sp + std::cos(phi1) * std::cos(phi2) * sl * sl;
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

// Maps a local meter offset (east, north) around lat/lon (0, 0) to
// coordinates. At the equator both axes use the same arc length.
inline LatLon meters_to_latlon(double east_m, double north_m) {
  LatLon out;
  out.lat = rad_to_deg(north_m / kEarthRadiusM);
  out.lon = rad_to_deg(east_m / kEarthRadiusM);
  return out;
}

}  // namespace denseloc
