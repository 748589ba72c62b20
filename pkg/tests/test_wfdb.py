import numpy as np
import pytest

from beatspace.wfdb import (
    AnnotationError,
    Format212Error,
    HeaderParseError,
    apply_adc_calibration,
    decode_annotations,
    decode_format212,
    parse_header,
    select_study_subset,
)
from wfdbgen import encode_annotations, encode_format212, header_text

RECORD_100_HEADER = """100 2 360 650000
100.dat 212 200 11 1024 995 -22131 0 MLII
100.dat 212 200 11 1024 1011 20052 0 V1
# 69 M 1085 1629 x1
"""


class TestParseHeader:
    def test_record_100_layout(self):
        h = parse_header(RECORD_100_HEADER)
        assert h.record_id == "100"
        assert h.n_signals == 2
        assert h.lead_names == ("MLII", "V1")
        assert h.sampling_rate == 360
        assert h.n_samples == 650000
        assert h.subject_age == 69
        assert h.subject_gender == "male"

    def test_synthetic_single_signal_roundtrip(self):
        text = "x1 1 250 1000\nx1.dat 212 200 11 1024 512 0 0 LEAD\n"
        h = parse_header(text)
        sig = h.signals[0]
        assert (sig.adc_gain, sig.adc_baseline, sig.initial_value) == (200.0, 1024, 512)
        assert sig.lead_name == "LEAD"
        assert h.subject_gender == "unknown" and h.subject_age is None

    def test_zero_signals_rejected(self):
        with pytest.raises(HeaderParseError, match="signal-count"):
            parse_header("bad 0 360 1000\n")

    def test_signal_count_mismatch(self):
        with pytest.raises(HeaderParseError, match="signal-count mismatch"):
            parse_header("bad 2 360 1000\nbad.dat 212 200 11 1024 0 0 0 MLII\n")

    def test_unsupported_format_code(self):
        with pytest.raises(HeaderParseError, match="format code"):
            parse_header("bad 1 360 1000\nbad.dat 16 200 11 1024 0 0 0 MLII\n")

    def test_multisegment_rejected(self):
        with pytest.raises(HeaderParseError, match="multi-segment"):
            parse_header("bad/3 1 360 1000\nbad.dat 212 200 11 1024 0 0 0 MLII\n")

    def test_parenthesized_baseline_wins(self):
        text = "x1 1 360 10\nx1.dat 212 200(77)/mV 11 1024 0 0 0 MLII\n"
        assert parse_header(text).signals[0].adc_baseline == 77

    def test_female_and_unknown_demographics(self):
        base = "x1 1 360 10\nx1.dat 212 200 11 1024 0 0 0 MLII\n"
        assert parse_header(base + "# 32 F\n").subject_gender == "female"
        assert parse_header(base + "# none\n").subject_gender == "unknown"


class TestDecodeFormat212:
    def test_zero_bytes(self):
        m = decode_format212(bytes([0x00, 0x00, 0x00]), 1, 2)
        assert m.tolist() == [[0, 0]]

    def test_sign_extension(self):
        # 0xFFF is -1 in 12-bit two's complement; second sample is 0.
        m = decode_format212(bytes([0xFF, 0x0F, 0x00]), 1, 2)
        assert m.tolist() == [[-1, 0]]

    def test_hand_decoded_pair(self):
        # byte0=0x34, nibble 0x2 -> 0x234 = 564; byte2=0x56, nibble 0x1 -> 0x156 = 342
        m = decode_format212(bytes([0x34, 0x12, 0x56]), 1, 2)
        assert m.tolist() == [[564, 342]]

    def test_truncated_stream(self):
        with pytest.raises(Format212Error) as err:
            decode_format212(bytes([0x00, 0x00]), 1, 2)
        assert err.value.expected == 3 and err.value.actual == 2

    def test_two_signal_interleave(self):
        adu = np.array([[1, 3, 5], [2, 4, 6]])
        m = decode_format212(encode_format212(adu), 2, 3)
        assert np.array_equal(m, adu)

    def test_roundtrip_random_streams(self):
        rng = np.random.default_rng(7)
        for n_signals, n_samples in [(1, 8), (2, 9), (2, 250), (1, 11)]:
            adu = rng.integers(-2048, 2048, size=(n_signals, n_samples))
            raw = encode_format212(adu)
            assert np.array_equal(decode_format212(raw, n_signals, n_samples), adu)

    def test_odd_total_ignores_pad_sample(self):
        adu = np.array([[10, -20, 30]])
        raw = encode_format212(adu)
        assert len(raw) == 6  # two 3-byte groups, second half-filled
        assert decode_format212(raw, 1, 3).tolist() == [[10, -20, 30]]


class TestDecodeAnnotations:
    def test_single_word(self):
        # word 0x0401: code 1 ('N'), increment 1
        anns = decode_annotations(bytes([0x01, 0x04, 0x00, 0x00]))
        assert len(anns) == 1
        assert anns[0].sample == 1 and anns[0].symbol == "N"

    def test_immediate_terminator(self):
        assert decode_annotations(bytes([0x00, 0x00])) == []

    def test_unterminated_stream(self):
        with pytest.raises(AnnotationError, match="unterminated"):
            decode_annotations(bytes([0x01, 0x04]))

    def test_cumulative_increments(self):
        anns = decode_annotations(encode_annotations([(10, "N"), (250, "V"), (300, "+")]))
        assert [(a.sample, a.symbol) for a in anns] == [(10, "N"), (250, "V"), (300, "+")]

    def test_skip_escape_long_gap(self):
        anns = decode_annotations(encode_annotations([(5, "N"), (100000, "N")]))
        assert [a.sample for a in anns] == [5, 100000]

    def test_aux_string_attached_and_padded(self):
        anns = decode_annotations(encode_annotations([(7, "+", "(N"), (20, "N")]))
        assert anns[0].aux == "(N"
        assert anns[1].aux is None

    def test_aux_odd_length_padded(self):
        anns = decode_annotations(encode_annotations([(7, "+", "(AFIB")]))
        assert anns[0].aux == "(AFIB"

    def test_chan_and_num_persist_sub_resets(self):
        words = bytearray()

        def put(word):
            words.extend([word & 0xFF, (word >> 8) & 0xFF])

        put((1 << 10) | 5)  # N at 5
        put((62 << 10) | 1)  # CHAN 1
        put((61 << 10) | 3)  # SUB 3
        put((1 << 10) | 5)  # N at 10
        put(0)
        anns = decode_annotations(bytes(words))
        assert anns[0].chan == 1 and anns[0].subtype == 3
        assert anns[1].chan == 1 and anns[1].subtype == 0

    def test_monotonicity_enforced(self):
        words = bytearray()

        def put(word):
            words.extend([word & 0xFF, (word >> 8) & 0xFF])

        put((1 << 10) | 100)  # N at 100
        put(59 << 10)  # SKIP of -50
        put(0xFFFF)
        put(0xFFCE)
        put((1 << 10) | 0)
        put(0)
        with pytest.raises(AnnotationError, match="decrease"):
            decode_annotations(bytes(words))

    def test_unknown_code_retained(self):
        words = bytes([0x02, 0x3C, 0x00, 0x00])  # code 15, dt 2
        anns = decode_annotations(words)
        assert anns[0].symbol == "[15]" and anns[0].sample == 2

    def test_escape_before_annotation_rejected(self):
        words = bytes([0x01, 0xF0, 0x00, 0x00])  # NUM escape first
        with pytest.raises(AnnotationError, match="escape"):
            decode_annotations(words)


class TestCalibration:
    def _header(self, gain=200.0, baseline=1024, n=4):
        return parse_header(f"x1 1 360 {n}\nx1.dat 212 {gain:g} 11 {baseline} 0 0 0 MLII\n")

    def test_baseline_maps_to_zero(self):
        h = self._header()
        sm = apply_adc_calibration(np.array([[1024, 1024, 1024, 1024]]), h)
        assert np.all(sm.samples == 0.0)

    def test_gain_definition(self):
        h = self._header()
        sm = apply_adc_calibration(np.array([[1224, 1024, 824, 1124]]), h)
        assert sm.samples[0].tolist() == [1.0, 0.0, -1.0, 0.5]

    def test_dimension_mismatch(self):
        h = self._header()
        with pytest.raises(ValueError, match="shape"):
            apply_adc_calibration(np.zeros((2, 4), dtype=int), h)

    def test_affine_linearity(self):
        h = self._header(gain=123.0, baseline=-7)
        rng = np.random.default_rng(0)
        adu = rng.integers(-2048, 2048, size=(1, 4))
        sm = apply_adc_calibration(adu, h)
        expected = (adu.astype(float) + 7) / 123.0
        assert np.allclose(sm.samples, expected, rtol=0, atol=0)


class TestStudySubset:
    def _h(self, record_id, leads):
        lines = [f"{record_id} {len(leads)} 360 1000"]
        lines += [f"{record_id}.dat 212 200 11 1024 0 0 0 {lead}" for lead in leads]
        return parse_header("\n".join(lines) + "\n")

    def test_selection_rules(self):
        headers = [
            self._h("102", ["V5", "V2"]),
            self._h("100", ["MLII", "V1"]),
            self._h("114", ["V5", "MLII"]),  # order matters
            self._h("103", ["MLII", "V2"]),
            self._h("205", ["MLII", "V1"]),
        ]
        assert select_study_subset(headers) == ["100", "205"]

    def test_empty_input(self):
        assert select_study_subset([]) == []
