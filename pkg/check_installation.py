"""
Quick Installation Check

Verifies that the toolkit's packages and modules import and that the core
numerics behave on a tiny problem. Run this after installation.
"""

import sys


def check_imports():
    """Check that all required packages can be imported."""
    print("Checking package imports...")
    packages = {
        'NumPy': 'numpy',
        'SciPy': 'scipy',
        'Pandas': 'pandas',
        'Pillow': 'PIL',
        'plyfile': 'plyfile',
        'python-dotenv': 'dotenv',
        'tqdm': 'tqdm',
    }

    failed = []
    for name, module in packages.items():
        try:
            __import__(module)
            print(f"  ✓ {name}")
        except ImportError as e:
            print(f"  ✗ {name} - {e}")
            failed.append(name)

    return len(failed) == 0, failed


def check_toolkit_modules():
    """Check that all toolkit modules can be imported."""
    print("\nChecking toolkit modules...")
    modules = [
        'config',
        'errors',
        'geometry',
        'solvers',
        'diffengine',
        'network',
        'training',
        'evaluation',
        'exporters',
        'file_formats',
        'tomo_engine',
    ]

    failed = []
    for module in modules:
        try:
            __import__(module)
            print(f"  ✓ {module}.py")
        except Exception as e:
            print(f"  ✗ {module}.py - {e}")
            failed.append(module)

    return len(failed) == 0, failed


def check_ista_equivalence():
    """An analytically initialized LISTA stack must reproduce ISTA."""
    print("\nChecking LISTA/ISTA equivalence...")
    try:
        import numpy as np

        import diffengine as de
        from geometry import ElevationGrid, build_baselines, build_measurement_matrix
        from network import init_params, lista_stack_forward
        from solvers import SolverConfig, ista_solve

        R = build_measurement_matrix(build_baselines(8, -100.0, 100.0, 0.031, 6.1434e5),
                                     ElevationGrid(32, -50.0, 50.0))
        rng = np.random.default_rng(0)
        g = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        reg = 0.1
        params = init_params(R, n1=4, theta_init=reg / R.lipschitz_constant, variant='lista')
        with de.no_grad():
            gamma, _ = lista_stack_forward(params.pre, de.Tensor(g), de.Tensor(np.zeros(32, complex)))
        expected, _ = ista_solve(R, g, SolverConfig(reg_lambda=reg, max_iters=4, tol=0.0))
        error = np.abs(gamma.data - expected).max()
        if error < 1e-10:
            print(f"  ✓ Max deviation {error:.2e}")
            return True
        print(f"  ✗ Max deviation {error:.2e} exceeds 1e-10")
        return False
    except Exception as e:
        print(f"  ✗ Equivalence check failed - {e}")
        return False


def check_archive_roundtrip():
    """Tensor archives must round-trip both dtypes."""
    print("\nChecking tensor archive...")
    try:
        import numpy as np

        from file_formats import decode_archive, encode_archive

        tensors = {'real': np.arange(6.0).reshape(2, 3), 'complex': np.array([1 + 2j, -3j])}
        restored = decode_archive(encode_archive(tensors))
        ok = all(np.array_equal(tensors[k], restored[k]) for k in tensors)
        print("  ✓ Archive round-trip" if ok else "  ✗ Archive round-trip mismatch")
        return ok
    except Exception as e:
        print(f"  ✗ Archive check failed - {e}")
        return False


def print_summary(results):
    """Print check summary."""
    print("\n" + "="*60)
    print("INSTALLATION CHECK SUMMARY")
    print("="*60)

    all_passed = all(results.values())

    if all_passed:
        print("\n✓ All checks passed! The toolkit is ready to use.")
        print("\nNext steps:")
        print("  1. Run demo: python demo.py")
        print("  2. Simulate: python tomo_engine.py simulate --out runs/sim")
        print("  3. Read documentation: README.md")
    else:
        print("\n⚠ Some checks failed. Please review the output above.")
        print("\nFailed checks:")
        for name, passed in results.items():
            if not passed:
                print(f"  - {name}")

        print("\nRefer to INSTALLATION.md for troubleshooting steps.")

    print("\n" + "="*60)

    return all_passed


def main():
    """Run all checks."""
    print("="*60)
    print("AETOMO TOOLKIT - INSTALLATION CHECK")
    print("="*60)

    results = {}
    results['Package Imports'], _ = check_imports()
    results['Toolkit Modules'], _ = check_toolkit_modules()
    results['LISTA/ISTA Equivalence'] = check_ista_equivalence()
    results['Tensor Archive'] = check_archive_roundtrip()

    all_passed = print_summary(results)
    sys.exit(0 if all_passed else 1)


if __name__ == "__main__":
    main()
