import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabgraa.dataset import (CATEGORICAL, NUMERIC, Column, DataError, RowRejected, Schema, Table,
                             ToySpec, Vocabulary, build_vocab, format_number, load_csv,
                             make_toy, parse_generated, parse_numeric_mode, serialize_row,
                             serialize_table, split)


@pytest.fixture
def schema():
    return Schema((Column("age", NUMERIC), Column("job", CATEGORICAL, ("a", "b", "c")),
                   Column("y", CATEGORICAL, ("no", "yes"))))


@pytest.fixture
def table(schema):
    rows = [(25.0, "a", "no"), (31.5, "b", "yes"), (-4.0, "c", "no"), (1e-3, "a", "yes")]
    return Table.from_rows(schema, rows)


def test_format_number_round_trips_six_digits():
    assert format_number(3.0) == "3"
    assert format_number(-0.5) == "-0.5"
    assert format_number(123456789) == "123457000"
    assert float(format_number(1 / 3)) == pytest.approx(0.333333, abs=1e-12)


def test_csv_round_trip(tmp_path, table):
    p = tmp_path / "t.csv"
    table.to_csv(p)
    back = load_csv(p, table.schema)
    assert back.rows == table.rows


def test_load_csv_infers_schema(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("x,c\n1,u\n2.5,v\n")
    t = load_csv(p)
    assert t.schema["x"].kind == NUMERIC and t.schema["c"].kind == CATEGORICAL
    assert t.rows == ((1.0, "u"), (2.5, "v"))


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ("x,c\n", "empty"),
    ("x,c\n1,u\n2\n", "ragged"),
])
def test_load_csv_errors(tmp_path, text, msg):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=msg):
        load_csv(p)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises((DataError, OSError)):
        load_csv(tmp_path / "nope.csv")


def test_split_sizes_and_disjoint(table):
    t = make_toy(ToySpec(n_rows=101), seed=3)
    tr, va, te = split(t, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (81, 10, 10)
    ids = [set(x.row_ids) for x in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert split(t, seed=0)[0].rows == tr.rows


def test_split_rejects_bad_ratios(table):
    with pytest.raises(DataError):
        split(table, (0.5, 0.5, 0.5))


def test_serialize_parse_round_trip(table):
    v = build_vocab(table)
    for r in table.rows:
        assert parse_generated(serialize_row(r, table.schema, v), table.schema, v) == r


def test_permuted_order_still_parses(table):
    v = build_vocab(table)
    r = table.rows[1]
    seq = serialize_row(r, table.schema, v, permute_seed=5)
    assert seq != serialize_row(r, table.schema, v)
    assert parse_generated(seq, table.schema, v) == r


def test_vocab_contents(table):
    v = build_vocab(table)
    assert v.tokens[:3] == ("<bos>", "<eos>", "<sep>")
    assert "is" in v and "age" in v and "yes" in v and "7" in v
    assert len(set(v.tokens)) == len(v.tokens)
    assert Vocabulary.from_dict(v.to_dict()) == v


def test_bin_mode(table):
    assert parse_numeric_mode("bin(4)") == ("bin", 4)
    assert parse_numeric_mode("bin:3") == ("bin", 3)
    with pytest.raises(DataError):
        parse_numeric_mode("float")
    v = build_vocab(table, "bin(2)")
    seq = serialize_row(table.rows[0], table.schema, v)
    row = parse_generated(seq, table.schema, v)
    edges = v.bin_edges["age"]
    assert edges[0] <= row[0] <= edges[-1]
    assert row[1:] == table.rows[0][1:]


def test_context_limit(table):
    v = build_vocab(table)
    with pytest.raises(DataError, match="context limit"):
        serialize_row(table.rows[0], table.schema, v, context_limit=5)


def _seq(v, *tokens):
    return (v.bos,) + tuple(v.id(t) for t in tokens) + (v.eos,)


@pytest.mark.parametrize("tokens,reason", [
    (("age", "is", "2", "<sep>", "job", "is", "a"), "missing column"),
    (("age", "is", "2", "<sep>", "age", "is", "3", "<sep>", "job", "is", "a", "<sep>", "y", "is", "no"),
     "duplicate column"),
    (("age", "is", "2", ".", ".", "<sep>", "job", "is", "a", "<sep>", "y", "is", "no"), "malformed number"),
    (("age", "is", "2", "<sep>", "job", "is", "yes", "<sep>", "y", "is", "no"), "unknown category"),
    (("age", "2", "<sep>", "job", "is", "a", "<sep>", "y", "is", "no"), "bad template"),
])
def test_parse_rejections(table, tokens, reason):
    v = build_vocab(table)
    with pytest.raises(RowRejected) as e:
        parse_generated(_seq(v, *tokens), table.schema, v)
    assert e.value.reason == reason


def test_parse_requires_eos(table):
    v = build_vocab(table)
    seq = serialize_row(table.rows[0], table.schema, v)[:-1]
    with pytest.raises(RowRejected):
        parse_generated(seq, table.schema, v)


def test_toy_is_seeded():
    a = make_toy(ToySpec(n_rows=50), seed=1)
    b = make_toy(ToySpec(n_rows=50), seed=1)
    c = make_toy(ToySpec(n_rows=50), seed=2)
    assert a.rows == b.rows and a.rows != c.rows
    assert a.schema.names == ["x0", "x1", "c0", "label"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4, allow_nan=False).filter(lambda x: x == 0 or abs(x) >= 1e-3)
                          .map(lambda x: float(format_number(x))),
                          st.sampled_from(["a", "b", "c"])), min_size=1, max_size=5))
def test_round_trip_property(rows):
    schema = Schema((Column("v", NUMERIC), Column("k", CATEGORICAL, ("a", "b", "c"))))
    t = Table.from_rows(schema, rows)
    voc = build_vocab(t)
    for seq, r in zip(serialize_table(t, voc), t.rows):
        assert parse_generated(seq, schema, voc) == r


def test_table_rejects_bad_rows(schema):
    with pytest.raises(DataError):
        Table.from_rows(schema, [(1.0, "zzz", "no")])
    with pytest.raises(DataError):
        Table.from_rows(schema, [(float("nan"), "a", "no")])
    with pytest.raises(DataError):
        Table(schema, ((1.0, "a", "no"), (2.0, "a", "no")), (0, 0))
