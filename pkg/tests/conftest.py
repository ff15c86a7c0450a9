import configparser
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from NestedCATE.cate_manager import RunConfig
from NestedCATE.dataset      import CohortDataset
from NestedCATE.simulate     import DgpSpec, LinearPredictor, parse_law


def make_dataset(x, s, a, y, continuous=True, columns=('x',)):
    """small hand-made dataset; a and y given as NaN on non-trial rows"""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return CohortDataset(covariates=x, columns=tuple(columns), modifiers=(columns[0],),
                         s=np.asarray(s), a=np.asarray(a, dtype=float), y=np.asarray(y, dtype=float),
                         continuous_outcome=continuous)


def make_spec(n=2000, covariates='xt: uniform(0,1); z: bernoulli(0.5)', modifier='xt',
              participation='-0.5 + 0.8*z', mu1='0.2 + 0.3*xt', mu0='0.35', **kwargs):
    laws = []
    for item in covariates.split(';'):
        name, _, law = item.partition(':')
        laws.append((name.strip(), parse_law(law)))
    return DgpSpec(n=n, covariates=tuple(laws), modifier=modifier,
                   participation=LinearPredictor(participation),
                   mu1=LinearPredictor(mu1), mu0=LinearPredictor(mu0), **kwargs)


def make_config(sections):
    config = configparser.ConfigParser(inline_comment_prefixes='#', empty_lines_in_values=False)
    config.read_dict(sections)
    return config


def make_run_config(command='validate', **sections):
    base = {'Run': {'seed': '11', 'replicates': '100'},
            'Schema': {'modifier': 'xt'},
            'Treatment': {'covariates': 'none'},
            'Grid': {'min': '0.1', 'max': '0.9', 'points': '21'}}
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    return RunConfig.from_config(make_config(base), command)


def write_config(path, sections):
    """write an INI file in the layout of cate_config.ini"""
    with open(path, 'w') as f:
        for name, values in sections.items():
            f.write('[' + name + ']\n')
            for key, value in values.items():
                f.write('    ' + key + ' = ' + str(value) + '\n')
            f.write('\n')
    return str(path)


@pytest.fixture
def linear_spec():
    """CATE(x) = 0.3 (x - 0.5); participation depends on z"""
    return make_spec(n=2000, sigma=0.5)


@pytest.fixture
def small_cohort():
    """4 rows: 2 trial rows (one per arm), 2 non-trial rows"""
    return "x,s,a,y\n0.1,1,1,1\n0.2,1,0,0\n0.3,0,,\n0.4,0,,\n"
