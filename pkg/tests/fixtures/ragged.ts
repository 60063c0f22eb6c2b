@problemName Ragged
@univariate false
@dimensions 2
@classLabel true x y
@data
1,2,3:4,5,6:x
1,2,3:4,5:y
