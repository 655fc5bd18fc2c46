# Static audit of the four legacy/hardened x layout builds.

from wssp import corpus
from wssp.audit import audit
from wssp.layout import Layout
from wssp.ssp import SspConfig, instrument, legacy_instrument

rows = []
for layout in (Layout.STACK_FIRST, Layout.NO_STACK_FIRST):
    m, tpl = corpus.gen_guest_A(16, 0, layout)
    cfg = SspConfig(legacy_guard_address=tpl.ground_truth["guard_slot"])
    for flavor, fn in (("legacy", legacy_instrument), ("hardened", instrument)):
        report = audit(fn(m, cfg)[0])
        rows.append((flavor, layout.value, report))

print("%-9s %-13s %-5s %-5s %-5s %-5s" % ("flavor", "layout", "P1", "P2a", "P2b", "P3"))
for flavor, layout, report in rows:
    cells = [v.status.value for v in report.verdicts.values()]
    print("%-9s %-13s %-5s %-5s %-5s %-5s" % (flavor, layout, *cells))

# why did P1 fail on the legacy build?
legacy = rows[0][2]
print(legacy.p1.rationale)
for site, what in legacy.p1.evidence:
    print("  ", site, what)

print(rows[1][2].to_json()["guard_location"])  # hardened: a global, out of memory's reach
