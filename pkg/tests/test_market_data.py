import io

import numpy as np
import pytest

from conftest import BASKET, synth
from fxgp.market_data import (Bar, DataError, InstrumentId, LeadLag, SynthSpec,
                              load_bars, psd_factor, split, synth_timestamps, synthesize,
                              trading_days)


def _csv(rows):
    return io.StringIO("timestamp,instrument,open,high,low,close\n" + "\n".join(rows) + "\n")


def _row(ts, inst, o=1.0, h=1.1, l=0.9, c=1.05):
    return f"{ts},{inst},{o},{h},{l},{c}"


def _stamp(k):
    t = np.datetime64("2013-01-07T00:00", "m") + np.timedelta64(5 * k, "m")
    return str(t) + ":00Z"


class TestInstrument:
    def test_render_and_parse(self):
        assert str(InstrumentId.parse("USD.JPY")) == "USD.JPY"

    def test_same_currency_rejected(self):
        with pytest.raises(ValueError):
            InstrumentId("USD", "USD")

    def test_bar_invariant(self):
        with pytest.raises(ValueError):
            Bar(None, 1.0, 0.9, 1.0, 1.0)


class TestLoadBars:
    def test_alignment_drops_incomplete_timestamps(self):
        rows = []
        for k in range(103):
            for inst in BASKET:
                if k >= 100 and inst == BASKET[k - 100]:
                    continue
                rows.append(_row(_stamp(k), inst))
        ds = load_bars(_csv(rows), BASKET)
        assert len(ds) == 100
        assert ds.dropped_timestamps == 3
        assert ds.prices.shape == (100, 4, 4)

    def test_high_below_low_reports_line(self):
        rows = [_row(_stamp(0), "EUR.USD"), _row(_stamp(0), "USD.JPY", 1.0, 0.8, 0.9, 1.0)]
        with pytest.raises(DataError, match="line 3"):
            load_bars(_csv(rows), ["EUR.USD", "USD.JPY"])

    def test_unknown_instrument(self):
        with pytest.raises(DataError, match="unknown instrument"):
            load_bars(_csv([_row(_stamp(0), "NZD.USD")]), ["EUR.USD"])

    def test_parse_failure_has_line_number(self):
        with pytest.raises(DataError, match="line 2"):
            load_bars(_csv([f"{_stamp(0)},EUR.USD,abc,1,1,1"]), ["EUR.USD"])

    def test_off_grid_timestamp(self):
        with pytest.raises(DataError, match="grid"):
            load_bars(_csv([_row("2013-01-07T00:03:00Z", "EUR.USD")]), ["EUR.USD"])

    def test_empty_after_alignment(self):
        with pytest.raises(DataError, match="no timestamp"):
            load_bars(_csv([_row(_stamp(0), "EUR.USD")]), ["EUR.USD", "USD.JPY"])

    def test_csv_round_trip(self, small_dataset, tmp_path):
        path = tmp_path / "bars.csv"
        text = small_dataset.to_csv(path)
        back = load_bars(path, small_dataset.instruments)
        assert np.array_equal(back.prices, small_dataset.prices)
        assert np.array_equal(back.timestamps, small_dataset.timestamps)
        assert back.to_csv() == text


class TestTradingDays:
    def test_boundary_at_17_eastern(self):
        # 2013-01-07 is a Monday; EST = UTC-5, so 17:00 ET = 22:00 UTC
        ts = np.array(["2013-01-07T21:55", "2013-01-07T22:00", "2013-01-07T22:05"], dtype="datetime64[ns]")
        days = trading_days(ts)
        assert days[0] == days[1] == np.datetime64("2013-01-07")
        assert days[2] == np.datetime64("2013-01-08")

    def test_boundary_follows_dst(self):
        # 2013-07-08: EDT = UTC-4, so 17:00 ET = 21:00 UTC
        ts = np.array(["2013-07-08T21:00", "2013-07-08T21:05"], dtype="datetime64[ns]")
        assert list(trading_days(ts)) == [np.datetime64("2013-07-08"), np.datetime64("2013-07-09")]

    def test_week_window(self):
        ts = synth_timestamps("2013-01-04", "2013-01-08")
        days = trading_days(ts)
        # Friday 17:00 ET closes the week; Sunday 17:05 ET opens Monday's day
        assert str(ts[ts < np.datetime64("2013-01-06T00:00")][-1]).startswith("2013-01-04T22:00")
        assert str(ts[ts > np.datetime64("2013-01-05T00:00")][0]).startswith("2013-01-06T22:05")
        assert set(np.unique(days).astype(str)) == {"2013-01-04", "2013-01-07", "2013-01-08"}

    def test_full_day_has_288_bars(self, small_dataset):
        ends = small_dataset.day_ends()
        sizes = np.diff(np.concatenate([[-1], ends]))
        assert np.all(sizes[1:-1] == 288)

    def test_multi_month_calendar(self):
        # reference counts include exchange holidays; the plain weekday
        # calendar used here only adds those back
        spans = [("2012-02-23T22:00Z", "2012-12-23T22:00Z", 213),
                 ("2012-12-23T22:00Z", "2013-02-22T22:00Z", 40),
                 ("2013-02-22T22:00Z", "2014-02-25T22:00Z", 254)]
        for lo, hi, holiday_days in spans:
            days = len(np.unique(trading_days(synth_timestamps(lo, hi))))
            assert holiday_days <= days <= holiday_days + 10
            # 5-minute bars: at most 288 datapoints per trading day
            assert len(synth_timestamps(lo, hi)) <= days * 288


class TestSplit:
    def test_contiguous_ranges_accepted(self, small_dataset):
        ts = small_dataset.timestamps
        t0, t1, t2, t3 = ts[0], ts[1000], ts[2000], ts[-1] + np.timedelta64(1, "s")
        sp = split(small_dataset, (t0, t1), (t1, t2), (t2, t3))
        assert len(sp.training) + len(sp.validation) + len(sp.oos) == len(small_dataset)
        assert sp.training.timestamps[-1] < sp.validation.timestamps[0] < sp.oos.timestamps[0]

    def test_empty_validation_rejected(self, small_dataset):
        ts = small_dataset.timestamps
        with pytest.raises(DataError, match="validation"):
            split(small_dataset, (ts[0], ts[10]), (ts[10], ts[10]), (ts[10], ts[-1]))

    def test_overlap_rejected(self, small_dataset):
        ts = small_dataset.timestamps
        with pytest.raises(DataError, match="overlaps"):
            split(small_dataset, (ts[0], ts[100]), (ts[50], ts[200]), (ts[200], ts[-1]))

    def test_partition_without_datapoints(self, small_dataset):
        ts = small_dataset.timestamps
        # a weekend gap: range inside Saturday
        with pytest.raises(DataError, match="no datapoints"):
            split(small_dataset, (ts[0], ts[100]), ("2013-01-12T12:00Z", "2013-01-12T13:00Z"),
                  (ts[2000], ts[-1]))


class TestSynthesize:
    def test_deterministic(self):
        a = synth(seed=11)
        b = synth(seed=11)
        assert a.to_csv() == b.to_csv()
        assert synth(seed=12).to_csv() != a.to_csv()

    def test_zero_vol_constant(self):
        ds = synthesize(SynthSpec(("EUR.USD", "USD.JPY"), "2013-01-07", "2013-01-09",
                                  drift=(0.0, 0.0), vol=(0.0, 0.0)))
        p = ds.prices
        assert np.all(p == p[0:1, :, 0:1])

    def test_bar_sanity(self, small_dataset):
        p = small_dataset.prices
        o, h, l, c = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
        assert np.all(p > 0)
        assert np.all((l <= o) & (o <= h) & (l <= c) & (c <= h))

    def test_lead_lag_correlation(self):
        ds = synthesize(SynthSpec(("EUR.USD", "USD.JPY"), "2013-01-06", "2013-02-03", seed=5,
                                  lead_lag=(LeadLag("EUR.USD", "USD.JPY", 1, 0.8),)))
        assert len(ds) == 20 * 288
        ra = np.diff(np.log(ds.close("EUR.USD")))[:5000]
        rb = np.diff(np.log(ds.close("USD.JPY")))[1:5001]
        rho = np.corrcoef(ra, rb)[0, 1]
        assert rho > 0.5

    def test_correlation_applied(self):
        corr = ((1.0, 0.9), (0.9, 1.0))
        ds = synthesize(SynthSpec(("EUR.USD", "GBP.USD"), "2013-01-06", "2013-01-20", seed=2,
                                  correlation=corr))
        r = np.diff(np.log(ds.prices[:, :, 3]), axis=0)
        assert abs(np.corrcoef(r.T)[0, 1] - 0.9) < 0.03

    def test_non_psd_rejected(self):
        with pytest.raises(ValueError, match="semi-definite"):
            psd_factor(np.array([[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1.0]]))
        with pytest.raises(ValueError):
            synthesize(SynthSpec(("EUR.USD", "GBP.USD", "USD.JPY"), "2013-01-07", "2013-01-08",
                                 correlation=((1, 0.9, -0.9), (0.9, 1, 0.9), (-0.9, 0.9, 1))))

    def test_variables_per_instrument(self):
        ds = synthesize(SynthSpec(("EUR.USD", "USD.JPY"), "2013-01-07", "2013-01-08"))
        assert len(ds.variables) == 8
        assert len(small := synth().variables) == 16
        assert small[0] == "AUD.USD.O"
