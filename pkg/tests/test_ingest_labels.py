import datetime as dt
import io

import numpy as np
import pytest

from lfmcmap.core import LandCoverClass
from lfmcmap.errors import ConfigError
from lfmcmap.geo import BoundingBox
from lfmcmap.ingest import (
    aggregate_same_day_site,
    enrich_observations,
    filter_samples,
    parse_labels,
)

from conftest import TEN_ROW_FIXTURE, labels_csv_text, make_grid


def parse_fixture(rows):
    return parse_labels(io.StringIO(labels_csv_text(rows)))


class TestParseLabels:
    def test_direct_mapping(self):
        result = parse_fixture(["A,34.1,-118.2,2021-06-01,95.0,chamise"])
        assert result.n_rejected == 0
        (s,) = result.samples
        assert (s.site_id, s.latitude, s.longitude) == ("A", 34.1, -118.2)
        assert s.date == dt.date(2021, 6, 1)
        assert s.lfmc_percent == 95.0
        assert s.species == "chamise"

    def test_out_of_range_latitude_rejected(self):
        result = parse_fixture(["A,95.0,-118.2,2021-06-01,95.0,"])
        assert result.samples == []
        assert result.n_rejected == 1
        assert "latitude" in result.rejects[0].reason

    def test_empty_file_with_header(self):
        result = parse_fixture([])
        assert result.samples == [] and result.rejects == []

    def test_bad_rows_collected_not_fatal(self):
        result = parse_fixture([
            "A,34.1,-118.2,2021-06-01,95.0,",
            "B,34.1,-118.2,not-a-date,95.0,",
            "C,34.1,-118.2,2021-06-01,-3.0,",
            ",34.1,-118.2,2021-06-01,95.0,",
        ])
        assert len(result.samples) == 1
        assert result.n_rejected == 3
        assert [r.row_index for r in result.rejects] == [2, 3, 4]

    def test_missing_mapped_column_is_config_error(self):
        stream = io.StringIO("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            parse_labels(stream)

    def test_custom_column_map(self, tmp_path):
        path = tmp_path / "renamed.csv"
        path.write_text("Site,Lat,Lon,Sampling date,LFMC (%)\n"
                        "X,40.0,-100.0,2021/06/01,77.5\n")
        result = parse_labels(path, column_map={
            "site": "Site", "lat": "Lat", "lon": "Lon",
            "date": "Sampling date", "value": "LFMC (%)"})
        assert result.samples[0].lfmc_percent == 77.5
        assert result.samples[0].species is None

    def test_ten_row_fixture(self):
        result = parse_fixture(TEN_ROW_FIXTURE)
        assert len(result.samples) == 9
        assert result.n_rejected == 1


class TestFilterSamples:
    def test_date_boundaries(self):
        rows = ["A,34.1,-118.2,2016-12-31,95.0,",
                "B,34.1,-118.2,2017-01-01,95.0,",
                "C,34.1,-118.2,2023-12-31,95.0,"]
        samples = parse_fixture(rows).samples
        kept = filter_samples(samples)
        assert [s.site_id for s in kept] == ["B", "C"]

    def test_outside_conus_excluded(self):
        samples = parse_fixture(["P,48.0,2.0,2021-06-01,95.0,"]).samples
        assert filter_samples(samples) == []

    def test_inverted_range_rejected(self):
        with pytest.raises(ConfigError):
            filter_samples([], date_range=(dt.date(2023, 1, 1), dt.date(2017, 1, 1)))

    def test_custom_bbox(self):
        samples = parse_fixture(["A,34.1,-118.2,2021-06-01,95.0,"]).samples
        box = BoundingBox(-119.0, 34.0, -118.0, 35.0)
        assert len(filter_samples(samples, bbox=box)) == 1


class TestAggregate:
    def test_mean_of_group(self):
        samples = parse_fixture([
            "A,34.1,-118.2,2021-06-01,90.0,",
            "A,34.1,-118.2,2021-06-01,100.0,",
            "A,34.1,-118.2,2021-06-01,110.0,",
        ]).samples
        (obs,) = aggregate_same_day_site(samples)
        assert obs.lfmc_percent == 100.0
        assert obs.n_merged == 3

    def test_distinct_dates_stay_separate(self):
        samples = parse_fixture([
            "A,34.1,-118.2,2021-06-01,90.0,",
            "A,34.1,-118.2,2021-06-02,90.0,",
        ]).samples
        assert len(aggregate_same_day_site(samples)) == 2

    def test_mean_then_cap(self):
        samples = parse_fixture([
            "A,34.1,-118.2,2021-06-01,300.0,",
            "A,34.1,-118.2,2021-06-01,320.0,",
        ]).samples
        (obs,) = aggregate_same_day_site(samples)
        # mean 310 first, cap after
        assert obs.lfmc_percent == 302.0
        assert obs.n_merged == 2

    def test_merged_count_conserved_and_keys_unique(self):
        samples = parse_fixture(TEN_ROW_FIXTURE).samples
        observations = aggregate_same_day_site(samples)
        assert len(observations) == 8
        assert sum(o.n_merged for o in observations) == 9
        keys = [o.key for o in observations]
        assert len(set(keys)) == len(keys)

    def test_order_insensitive(self):
        samples = parse_fixture(TEN_ROW_FIXTURE).samples
        a = aggregate_same_day_site(samples)
        b = aggregate_same_day_site(list(reversed(samples)))
        assert a == b


class TestEnrich:
    def make_rasters(self):
        grid = make_grid(height=8, width=8)
        land = np.full((8, 8), 30, dtype=np.int16)
        land[0, 0] = 10
        elev = np.full((8, 8), 1234.0, dtype=np.float32)
        return (land, grid), (elev, grid)

    def obs_at(self, lat, lon):
        samples = parse_fixture([f"A,{lat},{lon},2021-06-01,95.0,"]).samples
        return aggregate_same_day_site(samples)

    def test_lookup_inside(self):
        land, elev = self.make_rasters()
        grid = land[1]
        lat, lon = grid.center_lonlat()
        enriched = enrich_observations(self.obs_at(lat, lon), land, elev)
        assert enriched[0].land_cover is LandCoverClass.GRASS
        assert enriched[0].elevation_m == pytest.approx(1234.0)
        assert enriched[0].flags == ()

    def test_outside_coverage_flagged_not_dropped(self):
        land, elev = self.make_rasters()
        enriched = enrich_observations(self.obs_at(10.0, -50.0), land, elev)
        assert enriched[0].land_cover is None
        assert enriched[0].elevation_m is None
        assert set(enriched[0].flags) == {"land_cover_missing", "elevation_missing"}

    def test_nodata_flagged(self):
        (land, grid), elev = self.make_rasters()
        land = land.copy()
        land[:] = -1
        lat, lon = grid.center_lonlat()
        enriched = enrich_observations(self.obs_at(lat, lon), (land, grid), elev,
                                       land_cover_nodata=-1)
        assert enriched[0].land_cover is None
        assert "land_cover_missing" in enriched[0].flags
