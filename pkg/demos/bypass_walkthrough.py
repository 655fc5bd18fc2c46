# Guest B overwrites every word from its stack buffer upward.
# With a stack-first layout the legacy guard slot is in that path, so the
# attacker rewrites canary and guard with the same value and the check passes.

from wssp import corpus
from wssp.harness import RandomSource, RunSpec, run
from wssp.layout import Layout, classify_layout
from wssp.wasm import encode

m, tpl = corpus.gen_guest_B_bypass(0x41414141, Layout.STACK_FIRST)
print(tpl.name, tpl.parameters)

report = classify_layout(m)
print(report.layout.value, "stack region", report.stack_region, "data", report.data_range)

fixed = RandomSource.fixed(corpus.FIXED_ENTROPY)
for flavor in corpus.FLAVORS:
    built = corpus.build_flavor(m, tpl, flavor)
    out = run(RunSpec(encode(built), random=fixed))
    print("%-9s %-10s %r" % (flavor, out.category.value, out.stdout))

# same attack, other layout: the legacy slot sits below the stack now
m, tpl = corpus.gen_guest_B_bypass(0x41414141, Layout.NO_STACK_FIRST)
for flavor in ("legacy", "hardened"):
    out = run(RunSpec(encode(corpus.build_flavor(m, tpl, flavor)), random=fixed))
    print("nsf %-9s %s" % (flavor, out.category.value))
