import inspect

import pytest

from core.data import loaders, serialization, synthetic_data_manager
from core.models import bag, bif, classifiers, density, fib

MODULES = [bag, bif, fib, density, classifiers, loaders, serialization, synthetic_data_manager]


@pytest.mark.parametrize("module", MODULES, ids=lambda module: module.__name__)
def test_public_functions_have_docstrings(module):
    undocumented = [
        name
        for name, function in inspect.getmembers(module, inspect.isfunction)
        if function.__module__ == module.__name__ and not name.startswith("_") and not inspect.getdoc(function)
    ]
    assert undocumented == []
