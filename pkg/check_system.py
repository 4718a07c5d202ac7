"""
Stackcast System Check
Verify installation, configuration and module imports
"""

import sys
from pathlib import Path

MODULES = [
    'stacking.errors',
    'stacking.core',
    'stacking.losses',
    'stacking.baselearners',
    'stacking.cvharness',
    'stacking.optim',
    'stacking.stackers',
    'stacking.multilayer',
    'stacking.evalreport',
    'utils.config',
    'utils.ledger',
    'utils.storage',
    'utils.synthetic',
    'agents.planner',
]


def check_python_version():
    """Check Python version"""
    print("Checking Python version...")
    version = sys.version_info
    if version >= (3, 9):
        print(f"✓ Python {version.major}.{version.minor}.{version.micro}")
        return True
    print(f"✗ Python {version.major}.{version.minor}.{version.micro} (requires 3.9+)")
    return False


def check_dependencies():
    """Check required packages"""
    print("\nChecking dependencies...")

    required = {
        'yaml': 'pyyaml',
        'pandas': 'pandas',
        'numpy': 'numpy'
    }
    optional = {
        'pytest': 'pytest'
    }

    all_ok = True
    for module, package in required.items():
        try:
            __import__(module)
            print(f"✓ {package}")
        except ImportError:
            print(f"✗ {package} (REQUIRED)")
            all_ok = False

    for module, package in optional.items():
        try:
            __import__(module)
            print(f"✓ {package}")
        except ImportError:
            print(f"⚠ {package} (needed for the test suite)")

    return all_ok


def check_files():
    """Check configuration files exist and parse"""
    print("\nChecking configuration files...")

    all_ok = True
    for file in ['config.yml', 'presets.yml']:
        path = Path(__file__).parent / file
        if path.exists():
            print(f"✓ {file}")
        else:
            print(f"✗ {file} (MISSING)")
            all_ok = False

    if all_ok:
        try:
            from utils.config import RunConfig, get_config
            run_config = RunConfig.from_config(get_config())
            print(f"✓ config resolves: {len(run_config.base_learners)} base learners, "
                  f"{len(run_config.stackers)} stackers, {len(run_config.l2)} L2 stackers")
        except Exception as e:
            print(f"✗ config does not resolve: {e}")
            all_ok = False

    return all_ok


def test_imports():
    """Test critical imports"""
    print("\nTesting critical imports...")

    all_ok = True
    for module in MODULES:
        try:
            __import__(module)
            print(f"✓ {module}")
        except Exception as e:
            print(f"✗ {module}: {e}")
            all_ok = False
    return all_ok


def main():
    print("=" * 60)
    print("Stackcast System Check")
    print("=" * 60)

    # Add project root to Python path
    project_root = Path(__file__).parent
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))

    checks = {
        'Python Version': check_python_version(),
        'Dependencies': check_dependencies(),
        'Module Imports': test_imports(),
        'Configuration Files': check_files()
    }

    print("\n" + "=" * 60)
    print("SUMMARY")
    print("=" * 60)

    for name, result in checks.items():
        status = "✓ PASS" if result else "✗ FAIL"
        print(f"{name}: {status}")

    if all(checks.values()):
        print("\n✓ All checks passed! Stackcast is ready to use.")
        print("\nNext steps:")
        print("  1. python run.py synth data/demo.csv")
        print("  2. python run.py pipeline data/demo.csv --out-dir runs/demo")
        print("  3. See QUICKSTART.md for more info")
        return 0

    print("\n✗ Some checks failed. Please fix the issues above.")
    print("\nTo install missing dependencies:")
    print("  pip install -r requirements.txt")
    return 1


if __name__ == "__main__":
    sys.exit(main())
