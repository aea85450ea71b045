#pragma once

#include <string>
#include <vector>

#include "tgfuse/imaging.hpp"

namespace tgfuse {

// Fusion-quality metrics, computed on the 0-255 intensity scale. EN, SD, SF,
// AG depend only on the fused image; VIF and Qabf compare it against both
// sources and are symmetric under a source swap.
struct MetricReport {
    std::string image_id;
    double en = 0, sd = 0, sf = 0, ag = 0, vif = 0, qabf = 0;
};

// Shannon entropy (bits) of the 256-bin histogram.
double metric_en(const Image& f);
// Population standard deviation.
double metric_sd(const Image& f);
// sqrt(RF^2 + CF^2), RMS of horizontal/vertical first differences.
double metric_sf(const Image& f);
// Mean over interior pixels of sqrt((dx^2 + dy^2)/2), forward differences.
double metric_ag(const Image& f);
// Pixel-domain VIF over 4 Gaussian bands (sigma 1,2,4,8), averaged over the
// two sources. Requires at least 32x32 input.
double metric_vif(const Image& f, const Image& i1, const Image& i2);
// Xydeas-Petrovic edge preservation in [0,1].
double metric_qabf(const Image& f, const Image& i1, const Image& i2);

MetricReport metric_report(const Image& f, const Image& i1, const Image& i2,
                           const std::string& image_id);

MetricReport mean_report(const std::vector<MetricReport>& rows);

// Aligned text table in the EN,SD,SF,AG,VIF,Qabf column order with two
// decimals; appends a mean row when more than one row is given.
std::string metrics_table_text(const std::vector<MetricReport>& rows);
std::string metrics_table_csv(const std::vector<MetricReport>& rows);
std::string metric_report_json(const MetricReport& r);

}  // namespace tgfuse
