import sys
from typing import Callable, Any, TypeVar, NamedTuple
from math import floor
from itertools import count

import module_ as module_
import _dafny as _dafny
import System_ as System_

# Module: module_

class default__:
    def  __init__(self):
        pass

    @staticmethod
    def Squares(n):
        a: Any = None
        nw0_ = _dafny.Array(None, n)
        for d_0_i_ in _dafny.IntegerRange(0, n):
            nw0_[d_0_i_] = (d_0_i_) * (d_0_i_)
        a = nw0_
        return a

