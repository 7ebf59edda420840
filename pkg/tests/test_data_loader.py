import pytest

from src.exceptions import DataError
from src.models.domain_models import DatasetFormat
from src.services.data_loader import (
    export_edge_list, import_edge_list, load_graph, load_ontology, load_ratings
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_movielens_format_ignores_timestamps(tmp_path):
    path = write(tmp_path, "ratings.dat", "1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978298413\n")

    frame = load_ratings(path, DatasetFormat.MOVIELENS)
    assert frame.values.tolist() == [["1", "1193", 5], ["1", "661", 3], ["2", "1193", 4]]


def test_csv_and_movielens_formats_build_identical_graphs(tmp_path):
    dat = write(tmp_path, "ratings.dat", "1::10::5::0\n2::10::3::0\n2::20::1::0\n")
    csv = write(tmp_path, "ratings.csv", "userId,movieId,rating\n1,10,5\n2,10,3\n2,20,1\n")

    from_dat = load_graph(dat, DatasetFormat.MOVIELENS)
    from_csv = load_graph(csv, DatasetFormat.CSV)
    assert list(from_dat.edges()) == list(from_csv.edges())


def test_tab_separated_dump_is_supported(tmp_path):
    path = write(tmp_path, "douban.tsv", "alice\tbook-1\t4\nbob\tbook-1\t2\n")

    g = load_graph(path, DatasetFormat.TSV)
    assert g.user_ids == ["alice", "bob"]
    assert g.item_ids == ["book-1"]


def test_empty_file_is_a_data_error(tmp_path):
    path = write(tmp_path, "empty.dat", "")

    with pytest.raises(DataError):
        load_ratings(path, DatasetFormat.MOVIELENS)


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        load_ratings(tmp_path / "absent.dat")


def test_malformed_line_reports_line_number(tmp_path):
    path = write(tmp_path, "ratings.csv", "1,10,5\n2,10\n")

    with pytest.raises(DataError, match="line 2"):
        load_ratings(path, DatasetFormat.CSV)


def test_out_of_range_rating_reports_line_number(tmp_path):
    path = write(tmp_path, "ratings.dat", "1::10::5::0\n1::11::4::0\n2::10::9::0\n")

    with pytest.raises(DataError, match="line 3"):
        load_ratings(path, DatasetFormat.MOVIELENS)


def test_header_row_shifts_line_numbers(tmp_path):
    path = write(tmp_path, "ratings.csv", "user,item,rating\n1,10,5\n1,11,0\n")

    with pytest.raises(DataError, match="line 3"):
        load_ratings(path, DatasetFormat.CSV)


def test_edge_list_export_reloads_to_the_same_graph(tmp_path):
    source = write(tmp_path, "ratings.dat", "7::3::2::0\n7::12::5::0\n8::3::1::0\n")
    g = load_graph(source)

    exported = export_edge_list(g, tmp_path / "graph.tsv")
    assert exported.read_text(encoding="utf-8") == "7\t3\t2\n7\t12\t5\n8\t3\t1\n"
    assert list(import_edge_list(exported).edges()) == list(g.edges())


def test_ontology_lines_become_category_paths(tmp_path):
    path = write(
        tmp_path, "ontology.tsv",
        "b1\tBook:Computer & Internet:Database\nb2\tBook:Fiction\n"
    )

    ontology = load_ontology(path)
    assert ontology["b1"].segments == ["Book", "Computer & Internet", "Database"]
    assert ontology["b2"].depth == 1


def test_ontology_line_without_path_is_rejected(tmp_path):
    path = write(tmp_path, "ontology.tsv", "b1\tBook:Fiction\nb2\n")

    with pytest.raises(DataError, match="line 2"):
        load_ontology(path)


def test_decimal_rating_on_the_first_line_is_not_taken_for_a_header(tmp_path):
    path = write(tmp_path, "ratings.csv", "1,10,5.0\n2,10,3.0\n2,20,1.0\n")

    frame = load_ratings(path, DatasetFormat.CSV)
    assert frame.values.tolist() == [["1", "10", 5], ["2", "10", 3], ["2", "20", 1]]


def test_ontology_path_of_only_separators_is_rejected(tmp_path):
    path = write(tmp_path, "ontology.tsv", "b1\tBook:Fiction\nb2\t : :\n")

    with pytest.raises(DataError, match="line 2: empty category path"):
        load_ontology(path)
