"""Regenerates the built-in environment files under crates/core/data/envs."""
import os
import random

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data", "envs")


def box(x0, y0, x1, y1):
    return [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]


def write(name, header, walls, obstacles=()):
    with open(os.path.join(OUT, f"{name}.env"), "w") as f:
        f.write(header)
        for w in walls:
            f.write("walls = %g %g %g %g\n" % w)
        for o in obstacles:
            f.write("obstacles = %g %g %g %g\n" % o)


def wall_with_doors(fixed, horizontal, spans, door=1.5):
    """Wall along x=fixed (or y=fixed) split by one centered door per span."""
    out = []
    for a, b in spans:
        mid = (a + b) / 2
        for s, e in ((a, mid - door / 2), (mid + door / 2, b)):
            out.append((s, fixed, e, fixed) if horizontal else (fixed, s, fixed, e))
    return out


def simple():
    walls = box(0, 0, 20, 20)
    walls += box(5, 12, 7, 14) + box(13, 5, 15, 7) + box(12.5, 13, 14.5, 15)
    walls += [(9, 7, 9, 10)]
    write("simple", "# open 20 x 20 m room with a few obstacles\n"
          "name = simple\nbounds = 20 20\nstart_pose = 3 3 0.785398\nstep_limit = 500\n", walls)


def complex_walls():
    walls = box(0, 0, 30, 30)
    spans = [(0, 10), (10, 20), (20, 30)]
    for c in (10, 20):
        walls += wall_with_doors(c, False, spans)
        walls += wall_with_doors(c, True, spans)
    return walls


COMPLEX_HEADER = "bounds = 30 30\nstart_pose = 5 5 0\nstep_limit = 1000\n"


def complex_env():
    write("complex", "# 3 x 3 grid of 10 m rooms joined by 1.5 m doors\nname = complex\n" + COMPLEX_HEADER,
          complex_walls())


def dynamic():
    obstacles = [(0.3, 0.3, x, y) for x, y in ((15, 5), (25, 5), (5, 15), (15, 15), (25, 25), (5, 25))]
    write("dynamic", "# complex layout with six random-walk obstacles\nname = dynamic\n" + COMPLEX_HEADER,
          complex_walls(), obstacles)


def maze():
    cols, rows, cell = 10, 12, 2.5
    rng = random.Random(7)
    seen = {(0, 0)}
    stack = [(0, 0)]
    # open[(c, r, d)] marks a removed wall on side d of cell (c, r); d in {E, N}
    opened = set()
    while stack:
        c, r = stack[-1]
        nbrs = [(c + dc, r + dr, d) for dc, dr, d in ((1, 0, "E"), (-1, 0, "W"), (0, 1, "N"), (0, -1, "S"))
                if 0 <= c + dc < cols and 0 <= r + dr < rows and (c + dc, r + dr) not in seen]
        if not nbrs:
            stack.pop()
            continue
        nc, nr, d = rng.choice(nbrs)
        if d == "E":
            opened.add((c, r, "E"))
        elif d == "W":
            opened.add((nc, nr, "E"))
        elif d == "N":
            opened.add((c, r, "N"))
        else:
            opened.add((nc, nr, "N"))
        seen.add((nc, nr))
        stack.append((nc, nr))
    walls = box(0, 0, cols * cell, rows * cell)
    # vertical interior walls, merged into runs
    for c in range(cols - 1):
        x = (c + 1) * cell
        run = None
        for r in range(rows + 1):
            closed = r < rows and (c, r, "E") not in opened
            if closed and run is None:
                run = r
            elif not closed and run is not None:
                walls.append((x, run * cell, x, r * cell))
                run = None
    for r in range(rows - 1):
        y = (r + 1) * cell
        run = None
        for c in range(cols + 1):
            closed = c < cols and (c, r, "N") not in opened
            if closed and run is None:
                run = c
            elif not closed and run is not None:
                walls.append((run * cell, y, c * cell, y))
                run = None
    write("maze", "# 25 x 30 m depth-first maze with 2.5 m corridors\n"
          "name = maze\nbounds = 25 30\nstart_pose = 1.25 1.25 0\nstep_limit = 1000\n", walls)


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    simple()
    complex_env()
    dynamic()
    maze()
