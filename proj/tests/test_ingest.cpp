#include <doctest.h>

#include <sstream>

#include "bikefed/ingest.hpp"

using namespace bikefed;

namespace {

Timestamp ts(const char* s) {
    Timestamp t;
    REQUIRE(parse_timestamp(s, t));
    return t;
}

Trip trip(const char* a, const char* b, const char* t0, const char* t1) { return Trip{a, b, ts(t0), ts(t1)}; }

const TripSchema kSimple{"start", "end", "t0", "t1", ','};

}  // namespace

TEST_CASE("parse_trips maps fields and counts malformed rows") {
    std::istringstream in(
        "start,t0,end,t1\n"
        "A,2022-03-17T10:05:00,B,2022-03-17T10:25:00\n"
        "A,2022-03-17T11:00:00,,2022-03-17T11:10:00\n"
        "\"C, east\",2022-03-17 12:00:00.250,A,2022-03-17 12:30:00\n"
        "A,not-a-time,B,2022-03-17T10:25:00\n");
    const auto r = parse_trips(in, kSimple);
    REQUIRE(r.trips.size() == 2);
    CHECK(r.trips[0] == trip("A", "B", "2022-03-17T10:05:00", "2022-03-17T10:25:00"));
    CHECK(r.trips[1].start_station == "C, east");
    CHECK(r.trips[1].t_start == ts("2022-03-17T12:00:00"));
    CHECK(r.malformed == 2);
    CHECK(r.malformed_lines == std::vector<std::size_t>{3, 5});
}

TEST_CASE("parse_trips rejects a header without the declared columns") {
    std::istringstream in("start,end,t1\nA,B,2022-03-17T10:25:00\n");
    CHECK_THROWS_AS(parse_trips(in, kSimple), SchemaError);
    CHECK_THROWS_AS(parse_trips_file("/nonexistent/trips.csv", kSimple), IoError);
}

TEST_CASE("timestamp helpers") {
    const auto t = ts("2022-03-17T10:05:00");  // a Thursday
    CHECK(day_of_week(t) == 3);
    CHECK(hour_of_day(t) == 10);
    CHECK(format_timestamp(floor_to_hour(t)) == "2022-03-17T10:00:00");
    Timestamp bad;
    CHECK_FALSE(parse_timestamp("2022-02-30T10:00:00", bad));
    CHECK_FALSE(parse_timestamp("2022-03-17X10:00:00", bad));
}

TEST_CASE("clean_trips applies the duration, round-trip and activity rules") {
    std::vector<Trip> trips;
    // Busy stations A and B: 4 departures each per day over two days.
    for (int d = 17; d <= 18; ++d)
        for (int h = 8; h < 12; ++h) {
            char t0[32], t1[32];
            std::snprintf(t0, sizeof t0, "2022-03-%02dT%02d:00:00", d, h);
            std::snprintf(t1, sizeof t1, "2022-03-%02dT%02d:20:00", d, h);
            trips.push_back(trip("A", "B", t0, t1));
            trips.push_back(trip("B", "A", t0, t1));
        }
    trips.push_back(trip("A", "B", "2022-03-17T08:00:00", "2022-03-18T09:00:00"));  // 25 h
    trips.push_back(trip("A", "A", "2022-03-17T08:00:00", "2022-03-17T08:01:00"));  // 60 s round-trip
    trips.push_back(trip("A", "A", "2022-03-17T09:00:00", "2022-03-17T09:05:00"));  // kept round-trip
    trips.push_back(trip("B", "A", "2022-03-17T10:00:00", "2022-03-17T09:00:00"));  // negative

    CleanParams params;
    params.min_roundtrip = std::chrono::seconds{120};
    const auto r = clean_trips(trips, params);
    CHECK(r.report.input == trips.size());
    CHECK(r.report.removed_duration == 1);
    CHECK(r.report.removed_short_roundtrip == 1);
    CHECK(r.report.removed_negative == 1);
    CHECK(r.report.removed_inactive_station == 0);
    CHECK(r.report.retained == 17);
    CHECK(r.stations == std::set<StationId>{"A", "B"});
}

TEST_CASE("clean_trips drops stations below three rentals per active day") {
    std::vector<Trip> trips;
    // Q: 14 departures spread over 7 calendar days (2/day).
    for (int d = 0; d < 7; ++d)
        for (int k = 0; k < 2; ++k) {
            char t0[32], t1[32];
            std::snprintf(t0, sizeof t0, "2022-03-%02dT%02d:00:00", 10 + d, 8 + k);
            std::snprintf(t1, sizeof t1, "2022-03-%02dT%02d:30:00", 10 + d, 8 + k);
            trips.push_back(trip("Q", "P", t0, t1));
            // P: 3 departures on each of those days.
            trips.push_back(trip("P", "P", t0, t1));
        }
    for (int d = 0; d < 7; ++d) {
        char t0[32], t1[32];
        std::snprintf(t0, sizeof t0, "2022-03-%02dT15:00:00", 10 + d);
        std::snprintf(t1, sizeof t1, "2022-03-%02dT15:30:00", 10 + d);
        trips.push_back(trip("P", "P", t0, t1));
    }
    const auto r = clean_trips(trips);
    CHECK(r.stations == std::set<StationId>{"P"});
    CHECK(r.report.stations_dropped == 1);
    CHECK(r.report.removed_inactive_station == 14);
    for (const auto& t : r.trips) CHECK(t.start_station == "P");
    CHECK(clean_trips({}).trips.empty());
}

TEST_CASE("aggregate_demand counts arrivals on t_end and departures on t_start") {
    const std::vector<Trip> trips{trip("A", "B", "2022-03-17T10:05:00", "2022-03-17T10:25:00"),
                                  trip("A", "S", "2022-03-17T09:50:00", "2022-03-17T10:10:00"),
                                  trip("B", "S", "2022-03-17T09:40:00", "2022-03-17T10:59:59")};
    const auto store = aggregate_demand(trips, {"A", "B", "S", "Z"});
    const auto& s = store.at("S");
    CHECK(s.t0 == ts("2022-03-17T09:00:00"));
    REQUIRE(s.size() == 2);
    CHECK(s.arrivals[1] == 2);
    CHECK(s.departures[1] == 0);
    CHECK(store.at("A").departures[1] == 1);
    CHECK(store.at("B").arrivals[1] == 1);
    CHECK(store.at("Z").arrivals.sum() == 0);
    CHECK(store.at("Z").size() == 2);
    CHECK_THROWS_AS(aggregate_demand({}, {"A"}), DataError);
}

TEST_CASE("property: cleaned demand conserves trips") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<Trip> trips;
        const auto base = ts("2023-05-01T00:00:00");
        const int n = 50 + static_cast<int>(rng.below(400));
        for (int i = 0; i < n; ++i) {
            Trip t;
            t.start_station = "s" + std::to_string(rng.below(6));
            t.end_station = "s" + std::to_string(rng.below(6));
            t.t_start = base + std::chrono::seconds{static_cast<std::int64_t>(rng.below(5 * 86400))};
            t.t_end = t.t_start + std::chrono::seconds{static_cast<std::int64_t>(rng.below(30 * 3600)) - 600};
            trips.push_back(t);
        }
        CleanParams p;
        p.min_daily_rentals = 1.0 + rng.uniform() * 8.0;
        const auto cleaned = clean_trips(trips, p);
        const auto& r = cleaned.report;
        CHECK(r.input == r.retained + r.removed_duration + r.removed_negative + r.removed_short_roundtrip +
                             r.removed_inactive_station);
        if (cleaned.stations.empty()) continue;
        const auto store = aggregate_demand(cleaned.trips, cleaned.stations);
        std::int64_t arr = 0, dep = 0;
        for (const auto& [id, ds] : store) {
            arr += ds.arrivals.sum();
            dep += ds.departures.sum();
            CHECK(ds.arrivals.minCoeff() >= 0);
            CHECK(ds.size() == store.begin()->second.size());
        }
        CHECK(arr == static_cast<std::int64_t>(r.retained));
        CHECK(dep == static_cast<std::int64_t>(r.retained));
    }
}

namespace {
// Reference FNV-1a written out independently of the library.
std::uint64_t fnv_reference(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}
}  // namespace

TEST_CASE("partition_clients") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);

    std::set<StationId> stations;
    for (int i = 0; i < 100; ++i) stations.insert("station-" + std::to_string(i));

    const auto one = partition_clients(stations, 1, PartitionMode::hash);
    for (const auto& [s, c] : one.assignment) CHECK(c == 0);

    const auto p = partition_clients(stations, 8, PartitionMode::hash);
    CHECK(p.assignment.size() == stations.size());
    std::size_t total = 0;
    for (int c = 0; c < 8; ++c) {
        CHECK_FALSE(p.stations_of(c).empty());
        total += p.stations_of(c).size();
    }
    CHECK(total == stations.size());
    for (const auto& [s, c] : p.assignment) CHECK(c == static_cast<int>(fnv_reference(s) % 8));

    std::map<StationId, int> mapping;
    int k = 0;
    for (const auto& s : stations) mapping[s] = k++ % 3;
    CHECK(partition_clients(stations, 3, PartitionMode::file, &mapping).assignment == mapping);
    mapping.begin()->second = 3;
    CHECK_THROWS_AS(partition_clients(stations, 3, PartitionMode::file, &mapping), ConfigError);
    mapping.erase(mapping.begin());
    CHECK_THROWS_AS(partition_clients(stations, 3, PartitionMode::file, &mapping), ConfigError);
    CHECK_THROWS_AS(partition_clients(stations, 0, PartitionMode::hash), ConfigError);
}

TEST_CASE("temporal_split floors at 70% and 90%") {
    const auto a = temporal_split(1000);
    CHECK(a.train_end == 700);
    CHECK(a.valid_end == 900);
    const auto b = temporal_split(10);
    CHECK(b.train_end == 7);
    CHECK(b.valid_end == 9);
    CHECK_THROWS_AS(temporal_split(1000, {1.0, 0.0, 0.0}), DataError);
    CHECK_THROWS_AS(temporal_split(9), DataError);
    CHECK_THROWS_AS(temporal_split(100, {0.5, 0.2, 0.2}), ConfigError);
}

TEST_CASE("demand store file round-trips") {
    const std::vector<Trip> trips{trip("B", "A", "2022-03-17T10:05:00", "2022-03-17T12:25:00"),
                                  trip("A", "B", "2022-03-17T11:05:00", "2022-03-17T11:25:00")};
    const auto store = aggregate_demand(trips, {"A", "B"});
    const auto text = demand_store_csv(store);
    CHECK(text.rfind("station_id,hour_index,timestamp,arrivals,departures\nA,0,2022-03-17T10:00:00,0,0\n", 0) == 0);
    const auto back = read_demand_store_csv(text);
    REQUIRE(back.size() == 2);
    for (const auto& [id, ds] : store) {
        CHECK(back.at(id).t0 == ds.t0);
        CHECK(back.at(id).arrivals == ds.arrivals);
        CHECK(back.at(id).departures == ds.departures);
    }
}
