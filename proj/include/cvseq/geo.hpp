#pragma once

#include <utility>

namespace cvseq {

struct GeoPoint {
    double lat = 0.0;  // degrees, [-90, 90]
    double lon = 0.0;  // degrees, [-180, 180]
};

// validating constructor; throws on non-finite or out-of-range coordinates
GeoPoint geo_point(double lat, double lon);

// georeference of one north-up satellite patch
struct SatPatchGeo {
    GeoPoint center;
    double res_mpp = 0.0;  // ground resolution, meters per pixel
    int size_px = 0;       // native pixel side
};

SatPatchGeo sat_patch(GeoPoint center, double res_mpp, int size_px);

inline constexpr double kEarthRadiusM = 6371000.0;

// great-circle distance in meters
double haversine_m(const GeoPoint& a, const GeoPoint& b);

// Web-Mercator ground resolution at a latitude, meters per pixel
double mercator_resolution_mpp(double lat_deg, int zoom);

using PixelUV = std::pair<double, double>;  // u = column (east+), v = row (south+)

// Local equirectangular tangent plane at the patch center. Throws if the
// point lands outside [0, size_px)^2.
PixelUV gps_to_pixel(const GeoPoint& p, const SatPatchGeo& patch);

// exact inverse of gps_to_pixel's tangent-plane mapping
GeoPoint pixel_to_gps(double u, double v, const SatPatchGeo& patch);

// Euclidean pixel distance converted to ground meters. model_scale is the
// ratio native size_px / model input size (e.g. 640/256).
double pixel_error_to_meters(const PixelUV& pred, const PixelUV& gt, const SatPatchGeo& patch,
                             double model_scale);

}  // namespace cvseq
