"""Writing pipeline configurations as text, with static shape checks."""

from aaf import ConfigError, check_shapes, parse, preset, print_config

text = """
# relation-style fusion over pooled support features
[fusion]
components = [mul, sub, id]
pool = avg
"""
config = parse(text)
print(print_config(config))
print("same as the drl preset:", config == preset("drl"))

# 8x8x64 query cells against a 4x4x64 support map
check_shapes(config, (64, 64), (16, 64))
print("drl fits 8x8x64 / 4x4x64")

# element-wise fusion without alignment cannot combine 64 and 16 positions
try:
    check_shapes(parse("fusion = [mul]"), (64, 64), (16, 64))
except ConfigError as err:
    print("rejected:", err)

# errors carry a line and column
try:
    parse("[alignment]\nsupport = softmax_dot_product(inv_sqrt_d)\n[fusion]\ncomponents = [mull]\n")
except ConfigError as err:
    print(f"line {err.line}, column {err.column}: {err.message}")
