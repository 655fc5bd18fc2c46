# Where the guard comes from, and what happens when random_get fails.

from wssp import corpus
from wssp.harness import RandomSource, RunSpec, run
from wssp.layout import Layout
from wssp.ssp import inject_fault_random
from wssp.wasm import encode

m, tpl = corpus.gen_benign_suite(Layout.NO_STACK_FIRST)[4]  # factorial
print(tpl.name, repr(tpl.stdout))

hard = corpus.build_flavor(m, tpl, "hardened", debug_export=True)
legacy = corpus.build_flavor(m, tpl, "legacy", debug_export=True)


def go(mod, src):
    return run(RunSpec(encode(mod), random=src))


# host entropy: a fresh guard each run
print([hex(go(hard, RandomSource.host()).guard) for _ in range(3)])

# fixed entropy: guard is the first four bytes read little-endian
print(hex(go(hard, RandomSource.fixed(bytes.fromhex("DEADBEEF"))).guard))

# random_get reports an error
hard_out = go(inject_fault_random(hard), RandomSource.host())
print("hardened:", hard_out.category.value, hard_out.stdout, hard_out.symbol)

legacy_out = go(inject_fault_random(legacy), RandomSource.host())
slot = tpl.ground_truth["guard_slot"]
print("legacy:  ", legacy_out.category.value, hex(legacy_out.guard),
      "predictable:", legacy_out.guard == slot * 1103515245 % 2**32)
