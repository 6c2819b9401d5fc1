from ddsmc.verify import PROPERTIES, run_suite


def test_suite_is_green():
    results = run_suite()
    assert len(results) >= 12
    assert all(r.ok for r in results), [r for r in results if not r.ok]


def test_injected_fault_is_caught():
    results = run_suite(fault="flow-sign")
    assert not all(r.ok for r in results)
    # the fault is removed afterwards
    assert all(r.ok for r in run_suite(["reverse-round-trip", "kfe-kbe-duality"]))


def test_property_names_unique():
    assert len(set(PROPERTIES)) == len(PROPERTIES)
