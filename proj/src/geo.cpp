#include "cvseq/geo.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cvseq {

static constexpr double kPi = 3.14159265358979323846;

static double deg2rad(double d) { return d * kPi / 180.0; }
static double rad2deg(double r) { return r * 180.0 / kPi; }

GeoPoint geo_point(double lat, double lon) {
    if (!std::isfinite(lat) || !std::isfinite(lon))
        throw std::invalid_argument("geo_point: non-finite coordinate");
    if (lat < -90.0 || lat > 90.0)
        throw std::invalid_argument("geo_point: latitude " + std::to_string(lat) + " out of range");
    if (lon < -180.0 || lon > 180.0)
        throw std::invalid_argument("geo_point: longitude " + std::to_string(lon) + " out of range");
    return GeoPoint{lat, lon};
}

SatPatchGeo sat_patch(GeoPoint center, double res_mpp, int size_px) {
    if (!(res_mpp > 0.0)) throw std::invalid_argument("sat_patch: res_mpp must be positive");
    if (size_px <= 0) throw std::invalid_argument("sat_patch: size_px must be positive");
    return SatPatchGeo{center, res_mpp, size_px};
}

double haversine_m(const GeoPoint& a, const GeoPoint& b) {
    double lat1 = deg2rad(a.lat), lat2 = deg2rad(b.lat);
    double dlat = lat2 - lat1;
    double dlon = deg2rad(b.lon - a.lon);
    double s1 = std::sin(dlat / 2.0), s2 = std::sin(dlon / 2.0);
    double h = s1 * s1 + std::cos(lat1) * std::cos(lat2) * s2 * s2;
    h = std::min(1.0, h);
    return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

double mercator_resolution_mpp(double lat_deg, int zoom) {
    if (std::abs(lat_deg) >= 85.0)
        throw std::invalid_argument("mercator_resolution_mpp: latitude too close to the poles");
    return 156543.03392 * std::cos(deg2rad(lat_deg)) / std::pow(2.0, zoom);
}

PixelUV gps_to_pixel(const GeoPoint& p, const SatPatchGeo& patch) {
    double dx_east = kEarthRadiusM * std::cos(deg2rad(patch.center.lat)) *
                     deg2rad(p.lon - patch.center.lon);
    double dy_north = kEarthRadiusM * deg2rad(p.lat - patch.center.lat);
    double half = patch.size_px / 2.0;
    double u = half + dx_east / patch.res_mpp;
    double v = half - dy_north / patch.res_mpp;  // v grows southward
    if (u < 0.0 || u >= patch.size_px || v < 0.0 || v >= patch.size_px)
        throw std::out_of_range("gps_to_pixel: point maps outside the patch, (u,v)=(" +
                                std::to_string(u) + "," + std::to_string(v) + ")");
    return {u, v};
}

GeoPoint pixel_to_gps(double u, double v, const SatPatchGeo& patch) {
    double half = patch.size_px / 2.0;
    double dx_east = (u - half) * patch.res_mpp;
    double dy_north = (half - v) * patch.res_mpp;
    double lat = patch.center.lat + rad2deg(dy_north / kEarthRadiusM);
    double lon = patch.center.lon +
                 rad2deg(dx_east / (kEarthRadiusM * std::cos(deg2rad(patch.center.lat))));
    return GeoPoint{lat, lon};
}

double pixel_error_to_meters(const PixelUV& pred, const PixelUV& gt, const SatPatchGeo& patch,
                             double model_scale) {
    double du = pred.first - gt.first;
    double dv = pred.second - gt.second;
    return std::sqrt(du * du + dv * dv) * model_scale * patch.res_mpp;
}

}  // namespace cvseq
