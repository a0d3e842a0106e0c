from commands import cir, diagnose, generate, sample, torus

SUBCOMMANDS = {
    "generate": generate,
    "sample": sample,
    "diagnose": diagnose,
    "torus": torus,
    "cir": cir,
}
