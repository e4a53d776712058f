#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bikefed/common.hpp"

namespace bikefed {

using StationId = std::string;

struct Trip {
    StationId start_station;
    StationId end_station;
    Timestamp t_start;
    Timestamp t_end;

    bool operator==(const Trip&) const = default;
};

/// Column names of the four trip fields in the source header.
struct TripSchema {
    std::string start_station = "start_station_id";
    std::string end_station = "end_station_id";
    std::string started_at = "started_at";
    std::string ended_at = "ended_at";
    char delimiter = ',';
};

struct ParseResult {
    std::vector<Trip> trips;
    std::size_t malformed = 0;
    /// 1-based line numbers of the first few malformed rows, for diagnostics.
    std::vector<std::size_t> malformed_lines;
};

/// Reads delimited trip records with a header row. Quoted fields are
/// supported. Rows that fail to parse are counted in `malformed`.
ParseResult parse_trips(std::istream& source, const TripSchema& schema);
ParseResult parse_trips_file(const std::filesystem::path& path, const TripSchema& schema);

struct CleanParams {
    std::chrono::seconds min_roundtrip{120};
    std::chrono::seconds max_duration{24 * 3600};
    double min_daily_rentals = 3.0;
};

struct CleanReport {
    std::size_t input = 0;
    std::size_t removed_duration = 0;
    std::size_t removed_negative = 0;
    std::size_t removed_short_roundtrip = 0;
    std::size_t removed_inactive_station = 0;
    std::size_t retained = 0;
    std::size_t stations_dropped = 0;
};

struct CleanResult {
    std::vector<Trip> trips;
    std::set<StationId> stations;
    CleanReport report;
};

/// Drops over-long, negative-duration and short round-trips, then every trip
/// touching a station whose departures per active day fall below the
/// threshold. A station's active span counts calendar days from its first to
/// its last event, inclusive.
CleanResult clean_trips(const std::vector<Trip>& trips, const CleanParams& params = {});

/// Per-station hourly (arrivals, departures).
struct DemandSeries {
    StationId station;
    Timestamp t0;
    std::chrono::seconds step{kSecondsPerHour};
    Counts arrivals;
    Counts departures;

    Eigen::Index size() const { return arrivals.size(); }
    Timestamp time_at(Eigen::Index i) const { return t0 + step * i; }
};

using DemandStore = std::map<StationId, DemandSeries>;

struct HourGrid {
    Timestamp t0;
    Eigen::Index length = 0;
};

/// Hour grid covering every trip event: [floor_hour(min event), floor_hour(max event)] inclusive.
HourGrid grid_span(const std::vector<Trip>& trips);

/// Counts arrivals on t_end and departures on t_start into one shared hourly grid.
DemandStore aggregate_demand(const std::vector<Trip>& trips, const std::set<StationId>& stations,
                             std::chrono::seconds step = std::chrono::seconds{kSecondsPerHour});
DemandStore aggregate_demand(const std::vector<Trip>& trips, const std::set<StationId>& stations,
                             const HourGrid& grid);

struct ClientPartition {
    int n_clients = 1;
    std::map<StationId, int> assignment;

    std::vector<StationId> stations_of(int client) const;
};

enum class PartitionMode { hash, file };

ClientPartition partition_clients(const std::set<StationId>& stations, int n_clients, PartitionMode mode,
                                  const std::map<StationId, int>* mapping = nullptr);

/// Hour-index boundaries shared by every station: train [0, train_end),
/// valid [train_end, valid_end), test [valid_end, length).
struct TemporalSplit {
    Eigen::Index train_end = 0;
    Eigen::Index valid_end = 0;
    Eigen::Index length = 0;
};

struct SplitFractions {
    double train = 0.7;
    double valid = 0.2;
    double test = 0.1;
};

TemporalSplit temporal_split(Eigen::Index series_len, const SplitFractions& fractions = {});

// File formats.
std::string demand_store_csv(const DemandStore& store);
DemandStore read_demand_store_csv(const std::string& text);
nlohmann::json clean_report_json(const CleanReport& r);
nlohmann::json partition_json(const ClientPartition& p);
std::map<StationId, int> read_partition_json(const nlohmann::json& j);

}  // namespace bikefed
