"""CSV ingestion, serialization round trips, and the synthetic generator."""

import numpy as np
import pytest

from stmrgnn.data import (
    DemandPanel,
    SyntheticModeSpec,
    SyntheticSpec,
    coupling_lag_correlation,
    generate_synthetic,
    load_demand_csv,
    load_nodes_csv,
    write_demand_csv,
    write_nodes_csv,
)
from stmrgnn.errors import ContractError, ValidationError

NODES_CSV = """mode_id,node_id,lat,lon
1,a1,40.75,-73.98
1,a2,40.76,-73.97
1,a3,40.77,-73.99
2,b1,40.755,-73.985
2,b2,40.765,-73.975
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadNodes:
    def test_groups_by_mode_in_file_order(self, tmp_path):
        ns = load_nodes_csv(write(tmp_path, "n.csv", NODES_CSV))
        assert sorted(ns) == [1, 2]
        assert ns[1].node_ids == ["a1", "a2", "a3"]
        assert ns[2].node_ids == ["b1", "b2"]

    def test_duplicate_node_rejected_by_name(self, tmp_path):
        text = NODES_CSV + "1,a1,40.70,-73.90\n"
        with pytest.raises(ValidationError) as exc:
            load_nodes_csv(write(tmp_path, "n.csv", text))
        assert "a1" in str(exc.value)

    def test_latitude_range_checked(self, tmp_path):
        text = "mode_id,node_id,lat,lon\n1,a1,95.0,-73.98\n"
        with pytest.raises(ValidationError):
            load_nodes_csv(write(tmp_path, "n.csv", text))

    def test_malformed_row_names_line(self, tmp_path):
        text = "mode_id,node_id,lat,lon\n1,a1,40.75,-73.98\n1,a2,not-a-number,-73.97\n"
        with pytest.raises(ValidationError) as exc:
            load_nodes_csv(write(tmp_path, "n.csv", text))
        assert "line 3" in str(exc.value)


def demand_text(rows):
    return "mode_id,node_id,timestamp,inflow,outflow\n" + "\n".join(rows) + "\n"


class TestLoadDemand:
    @pytest.fixture
    def node_sets(self, tmp_path):
        return load_nodes_csv(write(tmp_path, "n.csv", NODES_CSV))

    def test_dense_panel(self, node_sets, tmp_path):
        rows = []
        for t in range(3):
            stamp = f"2024-01-01T{4 * t:02d}:00:00Z"
            for node in ("a1", "a2", "a3"):
                rows.append(f"1,{node},{stamp},{t + 1}.0,{t + 2}.0")
            for node in ("b1", "b2"):
                rows.append(f"2,{node},{stamp},1.0,1.0")
        panels, report = load_demand_csv(
            write(tmp_path, "d.csv", demand_text(rows)), node_sets)
        assert panels[1].values.shape == (3, 3, 2)
        assert report.total_missing == 0
        assert panels[1].values[2, 0, 0] == 3.0

    def test_missing_cell_zero_filled_and_counted(self, node_sets, tmp_path):
        rows = []
        for t in range(3):
            stamp = f"2024-01-01T{4 * t:02d}:00:00Z"
            for node in ("a1", "a2", "a3"):
                if t == 1 and node == "a2":
                    continue
                rows.append(f"1,{node},{stamp},1.0,2.0")
            for node in ("b1", "b2"):
                rows.append(f"2,{node},{stamp},1.0,1.0")
        panels, report = load_demand_csv(
            write(tmp_path, "d.csv", demand_text(rows)), node_sets)
        assert report.missing_cells[1] == 1
        assert panels[1].values[1, 1, 0] == 0.0

    def test_grid_gap_names_first_missing_interval(self, node_sets, tmp_path):
        rows = []
        for t in (0, 1, 3):  # skip 08:00
            stamp = f"2024-01-01T{4 * t:02d}:00:00Z"
            for node in ("a1", "a2", "a3"):
                rows.append(f"1,{node},{stamp},1.0,2.0")
            for node in ("b1", "b2"):
                rows.append(f"2,{node},{stamp},1.0,1.0")
        with pytest.raises(ValidationError) as exc:
            load_demand_csv(write(tmp_path, "d.csv", demand_text(rows)), node_sets)
        assert "2024-01-01T08:00:00Z" in str(exc.value)

    def test_negative_demand_rejected(self, node_sets, tmp_path):
        rows = ["1,a1,2024-01-01T00:00:00Z,-1.0,2.0"]
        with pytest.raises(ValidationError):
            load_demand_csv(write(tmp_path, "d.csv", demand_text(rows)), node_sets)

    def test_unknown_node_rejected(self, node_sets, tmp_path):
        rows = ["1,zz,2024-01-01T00:00:00Z,1.0,2.0"]
        with pytest.raises(ValidationError):
            load_demand_csv(write(tmp_path, "d.csv", demand_text(rows)), node_sets)


class TestRoundTrip:
    def test_load_write_load_identical(self, tiny_dataset, tmp_path):
        nodes, panels, _ = tiny_dataset
        write_nodes_csv(tmp_path / "nodes.csv", nodes)
        write_demand_csv(tmp_path / "demand.csv", panels)
        nodes2 = load_nodes_csv(tmp_path / "nodes.csv")
        panels2, report = load_demand_csv(tmp_path / "demand.csv", nodes2)
        assert report.total_missing == 0
        for m in panels:
            assert panels2[m].node_ids == panels[m].node_ids
            assert panels2[m].timestamps == panels[m].timestamps
            assert np.array_equal(panels2[m].values, panels[m].values)
            assert np.array_equal(nodes2[m].lat, nodes[m].lat)

        write_nodes_csv(tmp_path / "nodes2.csv", nodes2)
        write_demand_csv(tmp_path / "demand2.csv", panels2)
        assert (tmp_path / "nodes.csv").read_bytes() == (tmp_path / "nodes2.csv").read_bytes()
        assert (tmp_path / "demand.csv").read_bytes() == (tmp_path / "demand2.csv").read_bytes()


class TestPanelValidation:
    def test_non_uniform_timestamps_rejected(self, tiny_dataset):
        _, panels, _ = tiny_dataset
        stamps = list(panels[1].timestamps[:5])
        stamps[3] = stamps[4]
        with pytest.raises(ValidationError):
            DemandPanel(1, stamps, panels[1].node_ids,
                        panels[1].values[:5])

    def test_negative_values_rejected(self, tiny_dataset):
        _, panels, _ = tiny_dataset
        bad = panels[1].values[:5].copy()
        bad[0, 0, 0] = -1.0
        with pytest.raises(ValidationError):
            DemandPanel(1, list(panels[1].timestamps[:5]), panels[1].node_ids, bad)


class TestSyntheticGenerator:
    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(mode1=SyntheticModeSpec(5), mode2=SyntheticModeSpec(3),
                             length=100, seed=9)
        _, a, _ = generate_synthetic(spec)
        _, b, _ = generate_synthetic(spec)
        for m in (1, 2):
            assert np.array_equal(a[m].values, b[m].values)

    def test_non_negative_values(self, tiny_dataset):
        _, panels, _ = tiny_dataset
        for p in panels.values():
            assert np.all(p.values >= 0.0)

    def test_every_zone_has_coupled_stations(self, tiny_dataset):
        nodes, _, record = tiny_dataset
        assert set(record.neighbors) == set(nodes[2].node_ids)
        assert all(len(v) >= 1 for v in record.neighbors.values())

    def test_uncoupled_correlation_is_noise_level(self):
        spec = SyntheticSpec(mode1=SyntheticModeSpec(20), mode2=SyntheticModeSpec(10),
                             length=2000, seed=4, coupling_strength=0.0)
        _, panels, record = generate_synthetic(spec)
        r = coupling_lag_correlation(panels, record)
        assert np.max(np.abs(r)) < 0.1

    def test_coupled_correlation_strong(self):
        spec = SyntheticSpec(mode1=SyntheticModeSpec(20), mode2=SyntheticModeSpec(10),
                             length=2000, seed=4, coupling_strength=0.8,
                             coupling_lag=1)
        _, panels, record = generate_synthetic(spec)
        r = coupling_lag_correlation(panels, record)
        assert np.min(np.abs(r)) > 0.5

    def test_strength_bounds_validated(self):
        with pytest.raises(ContractError):
            generate_synthetic(SyntheticSpec(coupling_strength=1.5))

    def test_length_bound_validated(self):
        with pytest.raises(ContractError):
            generate_synthetic(SyntheticSpec(length=10))
