#pragma once

#include <string>

#include "bikefed/ingest.hpp"

namespace bikefed {

// Synthetic demand with commute-shaped daily cycles, weaker weekends,
// per-station scale and per-client heterogeneity, plus Poisson noise.
struct SynthSpec {
    int n_clients = 8;
    int stations_per_client = 20;
    int days = 120;
    std::uint64_t seed = 7;
    /// A Monday, so day-of-week features line up with calendar weeks.
    std::string start = "2023-01-02T00:00:00";
};

struct SynthDataset {
    DemandStore demand;
    ClientPartition partition;
};

SynthDataset synthetic_demand(const SynthSpec& spec);

/// Trip-level file body (header + rows) in the default schema, derived from
/// the same rate model, with a sprinkling of rows the cleaner must drop.
std::string synthetic_trip_csv(const SynthSpec& spec);

}  // namespace bikefed
